//! One-level Newton solver, two-level (coarse nonlinear / fine linearized)
//! solver, and the sparse direct linear solve they share.

use std::sync::Arc;
use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};

use crate::assembly::{
    build_dof_map, dot, norm2, Assembler, Convecting, FieldEval, FlowParams, Solution,
    SparseOperator,
};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, MeshHierarchy, Point2};
use crate::quadrature::{rule_for_degree, QuadratureRule, DEFAULT_ASSEMBLY_DEGREE};

/// Stopping rule and iteration budget for Newton's method.
///
/// Convergence is declared when the residual 2-norm falls below
/// `max(abs_tol, rel_tol * ||r0||)`; the relative leg guards against the
/// roundoff floor of the assembled residual on fine meshes.
#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iters: usize,
    /// Quadrature exactness degree used for all assembly.
    pub quad_degree: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            abs_tol: 1e-11,
            rel_tol: 1e-10,
            max_iters: 25,
            quad_degree: DEFAULT_ASSEMBLY_DEGREE,
        }
    }
}

impl NewtonSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) || self.max_iters < 1 {
            return Err(Error::InvalidArgument(format!(
                "invalid Newton settings: abs_tol={}, rel_tol={}, max_iters={}",
                self.abs_tol, self.rel_tol, self.max_iters
            )));
        }
        Ok(())
    }

    fn tolerance(&self, r0: f64) -> f64 {
        self.abs_tol.max(self.rel_tol * r0)
    }
}

/// Outcome bookkeeping for one solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
    /// Wall time of assembly + linear algebra, excluding mesh generation
    /// and error evaluation.
    pub wall_time_s: f64,
    pub linear_solves: usize,
    pub converged: bool,
}

impl SolveReport {
    fn merge(mut self, other: &SolveReport) -> SolveReport {
        self.iterations += other.iterations;
        self.final_residual = other.final_residual;
        self.residual_history
            .extend(other.residual_history.iter().copied());
        self.wall_time_s += other.wall_time_s;
        self.linear_solves += other.linear_solves;
        self.converged = self.converged && other.converged;
        self
    }
}

/// Direct sparse LU solve with iterative refinement until the residual
/// satisfies ||op x - rhs|| <= 1e-10 ||rhs||.
pub fn sparse_direct_solve(op: &SparseOperator, rhs: &[f64]) -> Result<Vec<f64>> {
    let lu = factorize(op)?;
    lu.solve_refined(op, rhs)
}

/// A reusable LU factorization of one operator.
pub struct Factorized {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    dim: usize,
}

pub fn factorize(op: &SparseOperator) -> Result<Factorized> {
    let p = &op.pattern;
    let mut triplets = Vec::with_capacity(p.nnz());
    for r in 0..p.dim {
        for k in p.row_ptr[r]..p.row_ptr[r + 1] {
            triplets.push(Triplet::new(r, p.cols[k] as usize, op.values[k]));
        }
    }
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(p.dim, p.dim, &triplets)
        .map_err(|e| Error::NumericalFailure(format!("sparse matrix creation: {e:?}")))?;
    let lu = mat
        .sp_lu()
        .map_err(|e| Error::NumericalFailure(format!("sparse LU factorization: {e:?}")))?;
    Ok(Factorized { lu, dim: p.dim })
}

impl Factorized {
    /// One backward-stable solve without refinement.
    pub fn solve_once(&self, rhs: &[f64]) -> Vec<f64> {
        let mut b = faer::Mat::from_fn(self.dim, 1, |i, _| rhs[i]);
        self.lu.solve_in_place(b.as_mut());
        (0..self.dim).map(|i| b[(i, 0)]).collect()
    }

    /// Solve with iterative refinement against the residual target.
    pub fn solve_refined(&self, op: &SparseOperator, rhs: &[f64]) -> Result<Vec<f64>> {
        let rhs_norm = norm2(rhs);
        let mut x = self.solve_once(rhs);
        for _ in 0..5 {
            let ax = op.matvec(&x);
            let res: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
            if norm2(&res) <= 1e-10 * rhs_norm.max(f64::MIN_POSITIVE) {
                return Ok(x);
            }
            let dx = self.solve_once(&res);
            for (x, d) in x.iter_mut().zip(&dx) {
                *x += d;
            }
        }
        let ax = op.matvec(&x);
        let res: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        if norm2(&res) <= 1e-10 * rhs_norm.max(f64::MIN_POSITIVE) {
            Ok(x)
        } else {
            Err(Error::NumericalFailure(format!(
                "iterative refinement stalled: residual {:.3e} vs target {:.3e}",
                norm2(&res),
                1e-10 * rhs_norm
            )))
        }
    }
}

/// Newton solve of the full nonlinear discrete system on one mesh.
pub fn solve_one_level(
    mesh: &Arc<Mesh>,
    params: FlowParams,
    forcing: &(dyn Fn(Point2) -> f64 + Sync),
    settings: &NewtonSettings,
) -> Result<(Solution, SolveReport)> {
    solve_one_level_from(mesh, params, forcing, settings, None)
}

/// Newton solve starting from an optional initial guess (used by the Rossby
/// continuation fallback).
pub fn solve_one_level_from(
    mesh: &Arc<Mesh>,
    params: FlowParams,
    forcing: &(dyn Fn(Point2) -> f64 + Sync),
    settings: &NewtonSettings,
    guess: Option<&Solution>,
) -> Result<(Solution, SolveReport)> {
    settings.validate()?;
    let start = Instant::now();
    let dofmap = build_dof_map(mesh);
    let quad = rule_for_degree(settings.quad_degree)?;
    let asm = Assembler::new(&dofmap, quad);
    let a = asm.biharmonic(params);
    let c = asm.beta_rotation(params);
    let load = asm.load(forcing, params);

    let mut current = match guess {
        Some(g) => {
            if g.dofmap.n_free != dofmap.n_free {
                return Err(Error::InvalidArgument(
                    "initial guess defined on a different discretization".into(),
                ));
            }
            Solution::new(&dofmap, g.coefficients.clone())
        }
        None => Solution::zeros(&dofmap),
    };

    let mut history = Vec::new();
    let mut linear_solves = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut tol = settings.abs_tol;
    for k in 0..=settings.max_iters {
        let (jac, residual) = asm.newton_system(&current, &a, &c, &load);
        let rnorm = norm2(&residual);
        history.push(rnorm);
        if k == 0 {
            tol = settings.tolerance(rnorm);
        }
        if rnorm <= tol {
            converged = true;
            break;
        }
        if k == settings.max_iters {
            break;
        }
        let delta = factorize(&jac)?.solve_refined(&jac, &residual)?;
        for (x, d) in current.coefficients.iter_mut().zip(&delta) {
            *x += d;
        }
        linear_solves += 1;
        iterations = k + 1;
    }

    let report = SolveReport {
        iterations,
        final_residual: *history.last().unwrap(),
        residual_history: history,
        wall_time_s: start.elapsed().as_secs_f64(),
        linear_solves,
        converged,
    };
    Ok((current, report))
}

/// One-level solve with a Rossby continuation fallback: if the cold start
/// diverges, solve first at Ro' = 1 and walk Ro down geometrically in three
/// steps, reusing each solution as the next initial guess.
pub fn solve_one_level_continued(
    mesh: &Arc<Mesh>,
    params: FlowParams,
    forcing: &(dyn Fn(Point2) -> f64 + Sync),
    settings: &NewtonSettings,
) -> Result<(Solution, SolveReport)> {
    let (solution, report) = solve_one_level(mesh, params, forcing, settings)?;
    if report.converged || params.rossby >= 1.0 {
        return Ok((solution, report));
    }
    let steps = 3;
    let mut guess: Option<Solution> = None;
    let mut total: Option<SolveReport> = None;
    let mut out = solution;
    for k in 1..=steps {
        let ro = params.rossby.powf(k as f64 / steps as f64);
        let stage = FlowParams::new(params.reynolds, ro)?;
        let (sol, rep) = solve_one_level_from(mesh, stage, forcing, settings, guess.as_ref())?;
        if !rep.converged {
            return Ok((sol, report.merge(&rep)));
        }
        total = Some(match total {
            None => rep,
            Some(t) => t.merge(&rep),
        });
        guess = Some(sol.clone());
        out = sol;
    }
    let mut total = report.merge(&total.unwrap());
    total.converged = true;
    Ok((out, total))
}

/// Step 2 of the two-level algorithm: a single linear solve on the fine mesh
/// with the convecting field frozen at the coarse solution.
pub fn solve_fine_linear(
    coarse: &Solution,
    hierarchy: &MeshHierarchy,
    params: FlowParams,
    forcing: &(dyn Fn(Point2) -> f64 + Sync),
    settings: &NewtonSettings,
) -> Result<(Solution, SolveReport)> {
    settings.validate()?;
    if coarse.mesh.n_triangles() != hierarchy.coarse.n_triangles() {
        return Err(Error::InvalidArgument(
            "coarse solution does not match the hierarchy's coarse mesh".into(),
        ));
    }
    let start = Instant::now();
    let dofmap = build_dof_map(&hierarchy.fine);
    let quad = rule_for_degree(settings.quad_degree)?;
    let asm = Assembler::new(&dofmap, quad);
    let a = asm.biharmonic(params);
    let c = asm.beta_rotation(params);
    let load = asm.load(forcing, params);
    let field = FieldEval::new(coarse);
    let mut op = asm.jacobian_form(&Convecting::Coarse {
        field: &field,
        parent_of: &hierarchy.parent_of,
    });
    op.add_scaled(&a, 1.0);
    op.add_scaled(&c, 1.0);
    let x = factorize(&op)?.solve_refined(&op, &load)?;
    let solution = Solution::new(&dofmap, x);
    let residual: Vec<f64> = load
        .iter()
        .zip(op.matvec(&solution.coefficients))
        .map(|(l, ax)| l - ax)
        .collect();
    let rnorm = norm2(&residual);
    let report = SolveReport {
        iterations: 0,
        final_residual: rnorm,
        residual_history: vec![rnorm],
        wall_time_s: start.elapsed().as_secs_f64(),
        linear_solves: 1,
        converged: true,
    };
    Ok((solution, report))
}

/// Full two-level solve: both solutions plus per-stage reports.
pub struct TwoLevelSolve {
    pub hierarchy: MeshHierarchy,
    pub coarse_solution: Solution,
    pub coarse_report: SolveReport,
    pub fine_solution: Solution,
    pub fine_report: SolveReport,
}

impl TwoLevelSolve {
    pub fn total_report(&self) -> SolveReport {
        self.coarse_report.clone().merge(&self.fine_report)
    }
}

/// Algorithm: Newton on the coarse mesh, then one linear solve on the fine
/// mesh obtained by `levels` red refinements.
pub fn solve_two_level(
    coarse_mesh: &Arc<Mesh>,
    levels: usize,
    params: FlowParams,
    forcing: &(dyn Fn(Point2) -> f64 + Sync),
    settings: &NewtonSettings,
) -> Result<TwoLevelSolve> {
    if levels == 0 {
        return Err(Error::InvalidArgument(
            "two-level solve requires at least one refinement level".into(),
        ));
    }
    let hierarchy = MeshHierarchy::build(coarse_mesh, levels)?;
    let (coarse_solution, coarse_report) =
        solve_one_level_continued(coarse_mesh, params, forcing, settings)?;
    let (fine_solution, fine_report) =
        solve_fine_linear(&coarse_solution, &hierarchy, params, forcing, settings)?;
    Ok(TwoLevelSolve {
        hierarchy,
        coarse_solution,
        coarse_report,
        fine_solution,
        fine_report,
    })
}

/// Relative defect of the energy identity Re^{-1} |psi|_2^2 = l(psi).
///
/// The left side is integrated directly from the solution's second
/// derivatives (independently of the assembled operators); the right side
/// pairs the load vector with the coefficients.
pub fn energy_identity_error(
    solution: &Solution,
    params: FlowParams,
    load: &[f64],
    quad: &QuadratureRule,
) -> f64 {
    let lhs = crate::assembly::integrate_triple(solution, solution, solution, quad, |u, _, _| {
        (u[3] + u[5]).powi(2)
    }) / params.reynolds;
    let rhs = dot(load, &solution.coefficients);
    (lhs - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::Pattern;
    use crate::mesh::{generate_rect_mesh, Rect};

    fn dense_pattern(n: usize) -> Arc<Pattern> {
        let row_ptr = (0..=n).map(|r| r * n).collect();
        let cols = (0..n).flat_map(|_| 0..n as u32).collect();
        Arc::new(Pattern { dim: n, row_ptr, cols })
    }

    #[test]
    fn direct_solve_identity() {
        let n = 7;
        let mut op = SparseOperator::zeros(dense_pattern(n));
        for i in 0..n {
            op.add_at(i, i, 1.0);
        }
        let rhs: Vec<f64> = (0..n).map(|i| i as f64 - 2.5).collect();
        let x = sparse_direct_solve(&op, &rhs).unwrap();
        for (a, b) in x.iter().zip(&rhs) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn direct_solve_recovers_known_spd_solution() {
        // Deterministic pseudo-random SPD system: M^T M + n I.
        let n = 50;
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut rand = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rand()).collect()).collect();
        let mut op = SparseOperator::zeros(dense_pattern(n));
        for i in 0..n {
            for j in 0..n {
                let mut v = if i == j { n as f64 } else { 0.0 };
                for k in 0..n {
                    v += m[k][i] * m[k][j];
                }
                op.add_at(i, j, v);
            }
        }
        let x_star: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37).sin()).collect();
        let rhs = op.matvec(&x_star);
        let x = sparse_direct_solve(&op, &rhs).unwrap();
        let scale = norm2(&x_star);
        let err: f64 = x
            .iter()
            .zip(&x_star)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err / scale <= 1e-10, "relative error {:.3e}", err / scale);
    }

    #[test]
    fn direct_solve_biharmonic_residual_check() {
        let mesh = generate_rect_mesh(Rect::unit_square(), 0.25).unwrap();
        let dofmap = build_dof_map(&mesh);
        let quad = rule_for_degree(DEFAULT_ASSEMBLY_DEGREE).unwrap();
        let asm = Assembler::new(&dofmap, quad);
        let params = FlowParams::new(1.0, 1.0).unwrap();
        let a = asm.biharmonic(params);
        let rhs = asm.load(&|p: Point2| (3.0 * p.x + p.y).sin(), params);
        let x = sparse_direct_solve(&a, &rhs).unwrap();
        let res: Vec<f64> = rhs
            .iter()
            .zip(a.matvec(&x))
            .map(|(b, ax)| b - ax)
            .collect();
        assert!(norm2(&res) <= 1e-10 * norm2(&rhs));
    }

    #[test]
    fn zero_forcing_gives_zero_solution_without_iterating() {
        let mesh = generate_rect_mesh(Rect::unit_square(), 0.25).unwrap();
        let params = FlowParams::new(1.0, 1.0).unwrap();
        let settings = NewtonSettings::default();
        let (sol, report) = solve_one_level(&mesh, params, &|_| 0.0, &settings).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 0);
        assert!(sol.coefficients.iter().all(|c| *c == 0.0));

        let two = solve_two_level(&mesh, 1, params, &|_| 0.0, &settings).unwrap();
        assert!(two.fine_solution.coefficients.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn nonlinear_solve_converges_and_satisfies_energy_identity() {
        let mesh = generate_rect_mesh(Rect::unit_square(), 0.125).unwrap();
        let params = FlowParams::new(1.0, 1.0).unwrap();
        let settings = NewtonSettings::default();
        let forcing = |p: Point2| (2.0 * p.x + 3.0 * p.y).sin();
        let (sol, report) = solve_one_level(&mesh, params, &forcing, &settings).unwrap();
        assert!(report.converged, "history {:?}", report.residual_history);
        assert!(report.iterations <= 10);
        assert!(norm2(&sol.coefficients) > 0.0);

        let quad = rule_for_degree(DEFAULT_ASSEMBLY_DEGREE).unwrap();
        let load = Assembler::new(&sol.dofmap, quad.clone()).load(&forcing, params);
        let defect = energy_identity_error(&sol, params, &load, &quad);
        assert!(defect <= 1e-8, "energy identity defect {defect:.3e}");
    }

    #[test]
    fn two_level_matches_one_level_scale_on_small_problem() {
        // Not an accuracy assertion (that's the convergence studies); only
        // that Step 2 produces a sane field of the same magnitude.
        let mesh = generate_rect_mesh(Rect::unit_square(), 0.25).unwrap();
        let params = FlowParams::new(1.0, 1.0).unwrap();
        let settings = NewtonSettings::default();
        let forcing = |p: Point2| (2.0 * p.x - p.y).cos();
        let two = solve_two_level(&mesh, 1, params, &forcing, &settings).unwrap();
        assert!(two.coarse_report.converged);
        assert!(two.fine_report.converged);
        let (one, _) = solve_one_level(&two.hierarchy.fine, params, &forcing, &settings).unwrap();
        let scale = norm2(&one.coefficients);
        let diff: f64 = one
            .coefficients
            .iter()
            .zip(&two.fine_solution.coefficients)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 0.2 * scale, "diff {diff:.3e} vs scale {scale:.3e}");
    }

    #[test]
    fn newton_terminal_phase_is_quadratic() {
        let mesh = generate_rect_mesh(Rect::unit_square(), 1.0 / 16.0).unwrap();
        // Large forcing so several Newton steps are needed.
        let params = FlowParams::new(1.0, 0.01).unwrap();
        let settings = NewtonSettings::default();
        let forcing = |p: Point2| (3.0 * p.x).sin() * (2.0 * p.y).cos();
        let (_, report) = solve_one_level(&mesh, params, &forcing, &settings).unwrap();
        assert!(report.converged);
        let h = &report.residual_history;
        assert!(h.len() >= 3, "history {h:?}");
        // Quadratic contraction in the terminal phase: some late step with a
        // small residual (but still above the assembly roundoff floor) must
        // contract like r_{k+1} <= kappa r_k^2.
        let quadratic_step = (0..h.len() - 1)
            .any(|k| h[k] < 0.1 * h[0] && h[k + 1] > 1e-11 * h[0] && h[k + 1] <= 1e2 * h[k] * h[k]);
        assert!(quadratic_step, "no quadratic terminal step in {h:?}");
    }
}
