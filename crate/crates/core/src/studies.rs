//! Experiment orchestration: configuration, the efficiency study, the
//! fixed-h coarse-size sweep, the H = ratio * h fine-size sweep, and table
//! emission (CSV / JSON / gnuplot data).

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    error_norms, observed_order, records_to_csv, ConvergenceRecord, ErrorNorms,
    ManufacturedSolution,
};
use crate::assembly::FlowParams;
use crate::error::{Error, Result};
use crate::mesh::{generate_rect_mesh, Mesh, MeshHierarchy};
use crate::quadrature::{rule_for_degree, DEFAULT_ASSEMBLY_DEGREE};
use crate::solver::{
    solve_fine_linear, solve_one_level_continued, solve_two_level, NewtonSettings, SolveReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    OneLevel,
    TwoLevel,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-level" => Ok(Method::OneLevel),
            "two-level" => Ok(Method::TwoLevel),
            other => Err(Error::InvalidArgument(format!(
                "unknown method '{other}' (expected one-level or two-level)"
            ))),
        }
    }
}

/// Declarative description of one study run (TOML file + flag overrides).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Registered problem id: sine-squared | boundary-layer.
    pub problem: String,
    /// Reynolds number; defaults to the problem's quoted value.
    pub re: Option<f64>,
    /// Rossby number; defaults to the problem's quoted value.
    pub ro: Option<f64>,
    pub method: Method,
    /// Decreasing list of target mesh sizes (fine h, or coarse H for the
    /// fixed-h sweep).
    pub h_list: Vec<f64>,
    /// Fixed fine size for the coarse-size sweep.
    pub fine_h: Option<f64>,
    /// Coarse-to-fine size ratio (power of two).
    pub ratio: usize,
    pub quad_degree: usize,
    pub newton_abs_tol: f64,
    pub newton_rel_tol: f64,
    pub newton_max_iters: usize,
    /// Rayon worker count; `None` uses all cores.
    pub workers: Option<usize>,
    /// Output base path; emits <out>.csv and <out>.json.
    pub out: Option<String>,
    /// Also emit gnuplot-ready .dat files.
    pub plots: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: "sine-squared".into(),
            re: None,
            ro: None,
            method: Method::TwoLevel,
            h_list: Vec::new(),
            fine_h: None,
            ratio: 2,
            quad_degree: DEFAULT_ASSEMBLY_DEGREE,
            newton_abs_tol: 1e-11,
            newton_rel_tol: 1e-10,
            newton_max_iters: 25,
            workers: None,
            out: None,
            plots: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.solution()?; // problem must be registered
        if self.ratio == 0 || !self.ratio.is_power_of_two() {
            return Err(Error::Config(format!(
                "ratio must be a positive power of two, got {}",
                self.ratio
            )));
        }
        for w in self.h_list.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config("h_list must be strictly decreasing".into()));
            }
        }
        if self.h_list.iter().chain(&self.fine_h).any(|h| *h <= 0.0) {
            return Err(Error::Config("mesh sizes must be positive".into()));
        }
        self.newton_settings().validate()?;
        FlowParams::new(self.params()?.reynolds, self.params()?.rossby)?;
        Ok(())
    }

    pub fn solution(&self) -> Result<ManufacturedSolution> {
        ManufacturedSolution::by_id(&self.problem)
    }

    pub fn params(&self) -> Result<FlowParams> {
        let sol = self.solution()?;
        FlowParams::new(
            self.re.unwrap_or(sol.default_params.reynolds),
            self.ro.unwrap_or(sol.default_params.rossby),
        )
    }

    pub fn newton_settings(&self) -> NewtonSettings {
        NewtonSettings {
            abs_tol: self.newton_abs_tol,
            rel_tol: self.newton_rel_tol,
            max_iters: self.newton_max_iters,
            quad_degree: self.quad_degree,
        }
    }
}

fn failed_record(h_coarse: Option<f64>, h: f64, time_s: f64) -> ConvergenceRecord {
    ConvergenceRecord {
        h_coarse,
        h,
        dofs_coarse: None,
        dofs_fine: 0,
        e_l2: f64::NAN,
        order_l2: None,
        e_h1: f64::NAN,
        order_h1: None,
        e_h2: f64::NAN,
        order_h2: None,
        time_s,
        converged: false,
    }
}

struct Measured {
    norms: ErrorNorms,
    dofs_fine: usize,
    record_time: f64,
}

fn measure(
    cfg: &ExperimentConfig,
    exact: &ManufacturedSolution,
    fine: &crate::assembly::Solution,
    report_time: f64,
) -> Result<Measured> {
    let quad = rule_for_degree(cfg.quad_degree)?;
    Ok(Measured {
        norms: error_norms(fine, exact, &quad),
        dofs_fine: fine.dofmap.n_free,
        record_time: report_time,
    })
}

fn attach_orders(
    record: &mut ConvergenceRecord,
    prev: Option<&ConvergenceRecord>,
    size_of: impl Fn(&ConvergenceRecord) -> f64,
) {
    if let Some(p) = prev {
        if p.converged && record.converged {
            let (hp, hc) = (size_of(p), size_of(record));
            record.order_l2 = observed_order(p.e_l2, record.e_l2, hp, hc);
            record.order_h1 = observed_order(p.e_h1, record.e_h1, hp, hc);
            record.order_h2 = observed_order(p.e_h2, record.e_h2, hp, hc);
        }
    }
}

/// One-level row at target size `h`.
pub fn run_one_level_row(
    cfg: &ExperimentConfig,
    exact: &ManufacturedSolution,
    h: f64,
) -> Result<ConvergenceRecord> {
    let params = cfg.params()?;
    let settings = cfg.newton_settings();
    let mesh = generate_rect_mesh(exact.domain, h)?;
    let forcing = |p| exact.forcing(params, p);
    let (sol, report) = solve_one_level_continued(&mesh, params, &forcing, &settings)?;
    if !report.converged {
        return Ok(failed_record(None, mesh.mesh_size, report.wall_time_s));
    }
    let m = measure(cfg, exact, &sol, report.wall_time_s)?;
    Ok(ConvergenceRecord {
        h_coarse: None,
        h: mesh.mesh_size,
        dofs_coarse: None,
        dofs_fine: m.dofs_fine,
        e_l2: m.norms.l2,
        order_l2: None,
        e_h1: m.norms.h1,
        order_h1: None,
        e_h2: m.norms.h2,
        order_h2: None,
        time_s: m.record_time,
        converged: true,
    })
}

/// Two-level row: coarse Newton at `coarse_h`, then `levels` red refinements.
/// `levels = 0` is the degenerate identical-meshes case.
pub fn run_two_level_row(
    cfg: &ExperimentConfig,
    exact: &ManufacturedSolution,
    coarse_h: f64,
    levels: usize,
) -> Result<ConvergenceRecord> {
    let params = cfg.params()?;
    let settings = cfg.newton_settings();
    let coarse_mesh = generate_rect_mesh(exact.domain, coarse_h)?;
    let forcing = |p| exact.forcing(params, p);

    let (coarse_rec, fine_sol, fine_rep, hierarchy): (
        SolveReport,
        crate::assembly::Solution,
        SolveReport,
        MeshHierarchy,
    );
    if levels == 0 {
        // Degenerate hierarchy: Step 2 becomes one frozen linear solve on
        // the same mesh.
        let identity = identity_hierarchy(&coarse_mesh);
        let (coarse_sol, crep) =
            solve_one_level_continued(&coarse_mesh, params, &forcing, &settings)?;
        if !crep.converged {
            return Ok(failed_record(
                Some(coarse_mesh.mesh_size),
                coarse_mesh.mesh_size,
                crep.wall_time_s,
            ));
        }
        let (fsol, frep) = solve_fine_linear(&coarse_sol, &identity, params, &forcing, &settings)?;
        (coarse_rec, fine_sol, fine_rep, hierarchy) = (crep, fsol, frep, identity);
    } else {
        let two = solve_two_level(&coarse_mesh, levels, params, &forcing, &settings)?;
        if !two.coarse_report.converged {
            return Ok(failed_record(
                Some(coarse_mesh.mesh_size),
                two.hierarchy.fine.mesh_size,
                two.coarse_report.wall_time_s,
            ));
        }
        (coarse_rec, fine_sol, fine_rep, hierarchy) = (
            two.coarse_report,
            two.fine_solution,
            two.fine_report,
            two.hierarchy,
        );
    }
    let total_time = coarse_rec.wall_time_s + fine_rep.wall_time_s;
    let m = measure(cfg, exact, &fine_sol, total_time)?;
    Ok(ConvergenceRecord {
        h_coarse: Some(hierarchy.coarse.mesh_size),
        h: hierarchy.fine.mesh_size,
        dofs_coarse: Some(crate::assembly::build_dof_map(&hierarchy.coarse).n_free),
        dofs_fine: m.dofs_fine,
        e_l2: m.norms.l2,
        order_l2: None,
        e_h1: m.norms.h1,
        order_h1: None,
        e_h2: m.norms.h2,
        order_h2: None,
        time_s: m.record_time,
        converged: true,
    })
}

pub fn identity_hierarchy(mesh: &Arc<Mesh>) -> MeshHierarchy {
    MeshHierarchy {
        coarse: Arc::clone(mesh),
        fine: Arc::clone(mesh),
        parent_of: (0..mesh.n_triangles()).collect(),
    }
}

/// For each fine size h: one-level at h and two-level at (H = ratio*h, h),
/// interleaved in pairs as in the published efficiency comparison.
pub fn run_efficiency_study(cfg: &ExperimentConfig) -> Result<Vec<ConvergenceRecord>> {
    cfg.validate()?;
    let exact = cfg.solution()?;
    let levels = cfg.ratio.ilog2() as usize;
    let mut records = Vec::new();
    let mut prev_one: Option<ConvergenceRecord> = None;
    let mut prev_two: Option<ConvergenceRecord> = None;
    for &h in &cfg.h_list {
        let mut one = run_one_level_row(cfg, &exact, h)?;
        attach_orders(&mut one, prev_one.as_ref(), |r| r.h);
        prev_one = Some(one.clone());
        records.push(one);

        let mut two = run_two_level_row(cfg, &exact, cfg.ratio as f64 * h, levels)?;
        attach_orders(&mut two, prev_two.as_ref(), |r| r.h);
        prev_two = Some(two.clone());
        records.push(two);
    }
    Ok(records)
}

/// Fine-size sweep with the coupled scaling H = ratio * h.
pub fn run_fine_sweep(cfg: &ExperimentConfig) -> Result<Vec<ConvergenceRecord>> {
    cfg.validate()?;
    let exact = cfg.solution()?;
    let levels = cfg.ratio.ilog2() as usize;
    let mut records: Vec<ConvergenceRecord> = Vec::new();
    for &h in &cfg.h_list {
        let mut row = match cfg.method {
            Method::TwoLevel => run_two_level_row(cfg, &exact, cfg.ratio as f64 * h, levels)?,
            Method::OneLevel => run_one_level_row(cfg, &exact, h)?,
        };
        attach_orders(&mut row, records.last(), |r| r.h);
        records.push(row);
    }
    Ok(records)
}

/// Coarse-size sweep at fixed fine h: H runs over `h_list`, each H a
/// power-of-two multiple of `fine_h`. Orders are with respect to H.
pub fn run_coarse_sweep(cfg: &ExperimentConfig) -> Result<Vec<ConvergenceRecord>> {
    cfg.validate()?;
    let fine_h = cfg.fine_h.ok_or_else(|| {
        Error::Config("the coarse-size sweep requires fine_h".into())
    })?;
    let exact = cfg.solution()?;
    let mut records: Vec<ConvergenceRecord> = Vec::new();
    for &big_h in &cfg.h_list {
        let ratio = big_h / fine_h;
        let levels = ratio.log2().round() as i64;
        if levels < 0 || (ratio / 2f64.powi(levels as i32) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "H = {big_h} is not a power-of-two multiple of fine h = {fine_h}"
            )));
        }
        let mut row = run_two_level_row(cfg, &exact, big_h, levels as usize)?;
        attach_orders(&mut row, records.last(), |r| r.h_coarse.unwrap());
        records.push(row);
    }
    Ok(records)
}

/// Writes <out>.csv, <out>.json, and optionally gnuplot .dat files.
pub fn emit_outputs(
    records: &[ConvergenceRecord],
    cfg: &ExperimentConfig,
    out_base: &Path,
) -> Result<()> {
    let write = |path: std::path::PathBuf, contents: String| -> Result<()> {
        std::fs::write(&path, contents).map_err(|source| Error::IoFailure { path, source })
    };
    write(out_base.with_extension("csv"), records_to_csv(records))?;

    let json = serde_json::json!({
        "config": cfg,
        "metadata": {
            "workers": cfg.workers,
            "quad_degree": cfg.quad_degree,
            "newton_abs_tol": cfg.newton_abs_tol,
            "newton_rel_tol": cfg.newton_rel_tol,
            "newton_max_iters": cfg.newton_max_iters,
            "timing": "wall time covers assembly + linear algebra, excluding mesh generation and error evaluation",
        },
        "records": records,
    });
    write(
        out_base.with_extension("json"),
        serde_json::to_string_pretty(&json).expect("records serialize") + "\n",
    )?;

    if cfg.plots {
        let mut time_vs_dofs = String::from("# dofs time_s\n");
        let mut error_vs_time = String::from("# time_s e_H2\n");
        for r in records.iter().filter(|r| r.converged) {
            time_vs_dofs.push_str(&format!("{} {:.17e}\n", r.dofs_fine, r.time_s));
            error_vs_time.push_str(&format!("{:.17e} {:.17e}\n", r.time_s, r.e_h2));
        }
        let stem = out_base.to_string_lossy();
        write(format!("{stem}_time_vs_dofs.dat").into(), time_vs_dofs)?;
        write(format!("{stem}_error_vs_time.dat").into(), error_vs_time)?;
    }
    Ok(())
}
