//! Global DoF numbering with clamped boundary constraints, sparse operator
//! assembly for the weak forms a, b, c and the load, and the Newton system.

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::element::{self, BasisEval, ElementMap, N_DOFS};
use crate::error::{Error, Result};
use crate::mesh::{find_parent, CentroidIndex, Mesh, Point2};
use crate::quadrature::QuadratureRule;

/// Nondimensional flow parameters of the SQGE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub reynolds: f64,
    pub rossby: f64,
}

impl FlowParams {
    pub fn new(reynolds: f64, rossby: f64) -> Result<Self> {
        if !(reynolds > 0.0) || !(rossby > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Re and Ro must be positive, got Re={reynolds}, Ro={rossby}"
            )));
        }
        Ok(Self { reynolds, rossby })
    }
}

/// Global Argyris DoF numbering: 6 DoFs per vertex (value, dx, dy, dxx, dxy,
/// dyy) followed by one normal-derivative DoF per edge.
#[derive(Debug)]
pub struct DofMap {
    pub mesh: Arc<Mesh>,
    /// Unique edges as ascending (lo, hi) global vertex pairs.
    pub edges: Vec<[usize; 2]>,
    /// Global DoF ids of the 21 local DoFs of each triangle.
    pub tri_dofs: Vec<[usize; N_DOFS]>,
    /// Per-triangle flags: local edge direction opposite to global ascending.
    pub tri_edge_flips: Vec<[bool; 3]>,
    /// Per-global-DoF constrained flag (the clamped-boundary set).
    pub constrained: Vec<bool>,
    /// Global DoF id -> free index, usize::MAX when constrained.
    pub free_index: Vec<usize>,
    pub n_free: usize,
}

impl DofMap {
    pub fn n_total(&self) -> usize {
        self.constrained.len()
    }

    pub fn free_of(&self, global: usize) -> Option<usize> {
        let f = self.free_index[global];
        (f != usize::MAX).then_some(f)
    }
}

/// Boundary constraints realizing psi = dpsi/dn = 0 on axis-aligned sides:
/// at a boundary vertex the value, both first derivatives, and the
/// tangential-tangential and tangential-normal second derivatives vanish;
/// the normal-normal one stays free except at corners. Every boundary edge
/// midpoint normal derivative is constrained.
pub fn build_dof_map(mesh: &Arc<Mesh>) -> Arc<DofMap> {
    let topo = mesh.edge_topology();
    let nv = mesh.n_vertices();
    let ne = topo.edges.len();
    let n_total = 6 * nv + ne;

    let mut tri_dofs = Vec::with_capacity(mesh.n_triangles());
    let mut tri_edge_flips = Vec::with_capacity(mesh.n_triangles());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let mut dofs = [0usize; N_DOFS];
        let mut flips = [false; 3];
        for (local_v, &v) in tri.vertex_ids.iter().enumerate() {
            for m in 0..6 {
                dofs[6 * local_v + m] = 6 * v + m;
            }
        }
        for k in 0..3 {
            dofs[18 + k] = 6 * nv + topo.tri_edges[t][k];
            let [lo, hi] = element::edge_endpoints(k);
            flips[k] = tri.vertex_ids[lo] > tri.vertex_ids[hi];
        }
        tri_dofs.push(dofs);
        tri_edge_flips.push(flips);
    }

    let mut on_horizontal = vec![false; nv];
    let mut on_vertical = vec![false; nv];
    let mut constrained = vec![false; n_total];
    for (e, side) in &mesh.boundary_edges {
        for &v in e {
            if side.is_horizontal() {
                on_horizontal[v] = true;
            } else {
                on_vertical[v] = true;
            }
        }
    }
    for v in 0..nv {
        if !(on_horizontal[v] || on_vertical[v]) {
            continue;
        }
        for m in [0, 1, 2, 4] {
            constrained[6 * v + m] = true; // value, dx, dy, dxy
        }
        if on_horizontal[v] {
            constrained[6 * v + 3] = true; // dxx along a horizontal side
        }
        if on_vertical[v] {
            constrained[6 * v + 5] = true; // dyy along a vertical side
        }
    }
    // Boundary edge normal-derivative DoFs.
    let mut edge_id = std::collections::HashMap::new();
    for (id, e) in topo.edges.iter().enumerate() {
        edge_id.insert(*e, id);
    }
    for (e, _) in &mesh.boundary_edges {
        constrained[6 * nv + edge_id[e]] = true;
    }

    let mut free_index = vec![usize::MAX; n_total];
    let mut n_free = 0;
    for (g, c) in constrained.iter().enumerate() {
        if !c {
            free_index[g] = n_free;
            n_free += 1;
        }
    }

    Arc::new(DofMap {
        mesh: Arc::clone(mesh),
        edges: topo.edges,
        tri_dofs,
        tri_edge_flips,
        constrained,
        free_index,
        n_free,
    })
}

/// Shared sparsity layout over free DoFs (CSR, sorted columns).
#[derive(Debug)]
pub struct Pattern {
    pub dim: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
}

impl Pattern {
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    fn build(dofmap: &DofMap) -> Self {
        let n = dofmap.n_free;
        let mut incident: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (t, dofs) in dofmap.tri_dofs.iter().enumerate() {
            for &g in dofs {
                if let Some(f) = dofmap.free_of(g) {
                    incident[f].push(t as u32);
                }
            }
        }
        let rows: Vec<Vec<u32>> = incident
            .par_iter()
            .map(|tris| {
                let mut cols = Vec::with_capacity(tris.len() * N_DOFS);
                for &t in tris {
                    for &g in &dofmap.tri_dofs[t as usize] {
                        if let Some(f) = dofmap.free_of(g) {
                            cols.push(f as u32);
                        }
                    }
                }
                cols.sort_unstable();
                cols.dedup();
                cols
            })
            .collect();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0usize);
        let mut total = 0;
        for r in &rows {
            total += r.len();
            row_ptr.push(total);
        }
        let mut cols = Vec::with_capacity(total);
        for r in rows {
            cols.extend(r);
        }
        Pattern { dim: n, row_ptr, cols }
    }

    fn slot(&self, row: usize, col: usize) -> Option<usize> {
        let span = &self.cols[self.row_ptr[row]..self.row_ptr[row + 1]];
        span.binary_search(&(col as u32)).ok().map(|k| self.row_ptr[row] + k)
    }
}

/// Sparse operator on the free DoFs, with a shared sparsity pattern.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    pub pattern: Arc<Pattern>,
    pub values: Vec<f64>,
    /// Advisory flag set by symmetric assemblies.
    pub symmetric: bool,
}

impl SparseOperator {
    pub fn zeros(pattern: Arc<Pattern>) -> Self {
        let nnz = pattern.nnz();
        Self { pattern, values: vec![0.0; nnz], symmetric: false }
    }

    pub fn dim(&self) -> usize {
        self.pattern.dim
    }

    pub fn add_at(&mut self, row: usize, col: usize, v: f64) {
        let slot = self.pattern.slot(row, col).expect("entry outside sparsity pattern");
        self.values[slot] += v;
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pattern.slot(row, col).map_or(0.0, |s| self.values[s])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let p = &self.pattern;
        (0..p.dim)
            .map(|r| {
                let mut acc = 0.0;
                for k in p.row_ptr[r]..p.row_ptr[r + 1] {
                    acc += self.values[k] * x[p.cols[k] as usize];
                }
                acc
            })
            .collect()
    }

    /// self += s * other; both must share the pattern.
    pub fn add_scaled(&mut self, other: &SparseOperator, s: f64) {
        assert!(Arc::ptr_eq(&self.pattern, &other.pattern));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// max |A[i][j] - sign * A[j][i]| over the pattern.
    fn pair_defect(&self, sign: f64) -> f64 {
        let p = &self.pattern;
        let mut worst = 0.0f64;
        for r in 0..p.dim {
            for k in p.row_ptr[r]..p.row_ptr[r + 1] {
                let c = p.cols[k] as usize;
                worst = worst.max((self.values[k] - sign * self.get(c, r)).abs());
            }
        }
        worst
    }

    pub fn asymmetry(&self) -> f64 {
        self.pair_defect(1.0)
    }

    pub fn skew_defect(&self) -> f64 {
        self.pair_defect(-1.0)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let p = &self.pattern;
        let mut m = nalgebra::DMatrix::zeros(p.dim, p.dim);
        for r in 0..p.dim {
            for k in p.row_ptr[r]..p.row_ptr[r + 1] {
                m[(r, p.cols[k] as usize)] = self.values[k];
            }
        }
        m
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Coefficients of a discrete streamfunction over the free DoFs; constrained
/// DoFs are implicitly zero.
#[derive(Debug)]
pub struct Solution {
    pub mesh: Arc<Mesh>,
    pub dofmap: Arc<DofMap>,
    pub coefficients: Vec<f64>,
    evaluator: OnceLock<Arc<(CentroidIndex, FieldEval)>>,
}

impl Clone for Solution {
    fn clone(&self) -> Self {
        Self {
            mesh: Arc::clone(&self.mesh),
            dofmap: Arc::clone(&self.dofmap),
            coefficients: self.coefficients.clone(),
            evaluator: OnceLock::new(),
        }
    }
}

impl Solution {
    pub fn new(dofmap: &Arc<DofMap>, coefficients: Vec<f64>) -> Self {
        assert_eq!(coefficients.len(), dofmap.n_free);
        Self {
            mesh: Arc::clone(&dofmap.mesh),
            dofmap: Arc::clone(dofmap),
            coefficients,
            evaluator: OnceLock::new(),
        }
    }

    pub fn zeros(dofmap: &Arc<DofMap>) -> Self {
        Self::new(dofmap, vec![0.0; dofmap.n_free])
    }

    /// Local 21-vector of element coefficients (constrained DoFs read as 0).
    pub fn local_coefficients(&self, tri: usize) -> [f64; N_DOFS] {
        let mut c = [0.0; N_DOFS];
        for (l, &g) in self.dofmap.tri_dofs[tri].iter().enumerate() {
            if let Some(f) = self.dofmap.free_of(g) {
                c[l] = self.coefficients[f];
            }
        }
        c
    }

    fn evaluator(&self) -> &Arc<(CentroidIndex, FieldEval)> {
        self.evaluator.get_or_init(|| {
            Arc::new((CentroidIndex::new(&self.mesh), FieldEval::new(self)))
        })
    }

    /// Value, gradient, and second derivatives at an arbitrary domain point.
    pub fn eval(&self, p: Point2) -> Result<[f64; 6]> {
        let (index, field) = &**self.evaluator();
        let tri = find_parent(p, &self.mesh, index)?;
        Ok(field.eval_in(tri, p))
    }
}

/// Precomputed per-element data for evaluating one discrete field at
/// arbitrary points of known elements: the element maps plus the
/// monomial-side coefficient vectors d = M^T c.
#[derive(Debug)]
pub struct FieldEval {
    maps: Vec<ElementMap>,
    d: Vec<[f64; N_DOFS]>,
}

impl FieldEval {
    pub fn new(sol: &Solution) -> Self {
        let maps = element_maps(&sol.dofmap);
        let d = (0..sol.mesh.n_triangles())
            .into_par_iter()
            .map(|t| {
                let c = sol.local_coefficients(t);
                let m = maps[t].dof_transform();
                let mut d = [0.0; N_DOFS];
                for j in 0..N_DOFS {
                    let mut acc = 0.0;
                    for i in 0..N_DOFS {
                        acc += c[i] * m[(i, j)];
                    }
                    d[j] = acc;
                }
                d
            })
            .collect();
        Self { maps, d }
    }

    /// [value, dx, dy, dxx, dxy, dyy] at `p`, which must lie in element `tri`.
    pub fn eval_in(&self, tri: usize, p: Point2) -> [f64; 6] {
        let map = &self.maps[tri];
        let [xi, eta] = map.to_reference(p);
        let pushed = map.pushforward(&element::reference_basis(xi, eta));
        let d = &self.d[tri];
        let mut out = [0.0; 6];
        for j in 0..N_DOFS {
            out[0] += d[j] * pushed.values[j];
            out[1] += d[j] * pushed.gradients[j][0];
            out[2] += d[j] * pushed.gradients[j][1];
            out[3] += d[j] * pushed.hessians[j][0];
            out[4] += d[j] * pushed.hessians[j][1];
            out[5] += d[j] * pushed.hessians[j][2];
        }
        out
    }

    pub fn laplacian_in(&self, tri: usize, p: Point2) -> f64 {
        let e = self.eval_in(tri, p);
        e[3] + e[5]
    }
}

/// Element maps for every triangle, with the global edge-normal orientation.
pub fn element_maps(dofmap: &DofMap) -> Vec<ElementMap> {
    (0..dofmap.mesh.n_triangles())
        .into_par_iter()
        .map(|t| {
            ElementMap::with_edge_flips(
                dofmap.mesh.triangle_vertices(t),
                dofmap.tri_edge_flips[t],
            )
            .expect("mesh triangles are positively oriented")
        })
        .collect()
}

/// Interpolates a smooth function (given as [value, dx, dy, dxx, dxy, dyy])
/// onto the free DoFs.
pub fn interpolate(dofmap: &Arc<DofMap>, f: &(dyn Fn(Point2) -> [f64; 6] + Sync)) -> Solution {
    let mesh = &dofmap.mesh;
    let nv = mesh.n_vertices();
    let mut coeffs = vec![0.0; dofmap.n_free];
    for (v, p) in mesh.vertices.iter().enumerate() {
        let d = f(*p);
        for m in 0..6 {
            if let Some(fr) = dofmap.free_of(6 * v + m) {
                coeffs[fr] = d[m];
            }
        }
    }
    for (e, pair) in dofmap.edges.iter().enumerate() {
        if let Some(fr) = dofmap.free_of(6 * nv + e) {
            let (a, b) = (mesh.vertices[pair[0]], mesh.vertices[pair[1]]);
            let t = [b.x - a.x, b.y - a.y];
            let len = t[0].hypot(t[1]);
            let n = [t[1] / len, -t[0] / len];
            let mid = Point2::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y));
            let d = f(mid);
            coeffs[fr] = n[0] * d[1] + n[1] * d[2];
        }
    }
    Solution::new(dofmap, coeffs)
}

/// The convecting field zeta of the trilinear form b(zeta; ., .).
pub enum Convecting<'a> {
    Zero,
    /// A solution on the assembly mesh itself.
    Fine(&'a Solution),
    /// A coarse-mesh solution accessed through the stored parentage.
    Coarse { field: &'a FieldEval, parent_of: &'a [usize] },
}

type Local = [[f64; N_DOFS]; N_DOFS];

const ZERO_LOCAL: Local = [[0.0; N_DOFS]; N_DOFS];
const CHUNK: usize = 256;

/// Element-loop assembly engine for one mesh/quadrature pair. Element maps
/// and the reference-basis table at the quadrature points are computed once.
pub struct Assembler {
    pub dofmap: Arc<DofMap>,
    pub quad: QuadratureRule,
    pub pattern: Arc<Pattern>,
    maps: Vec<ElementMap>,
    ref_evals: Vec<BasisEval>,
}

struct ElementQp {
    /// Physical shape functions at each quadrature point.
    phys: Vec<BasisEval>,
    /// Physical quadrature points.
    points: Vec<Point2>,
    /// Physical weights (reference weight times Jacobian determinant).
    weights: Vec<f64>,
}

impl Assembler {
    pub fn new(dofmap: &Arc<DofMap>, quad: QuadratureRule) -> Self {
        let maps = element_maps(dofmap);
        let ref_evals = quad
            .points
            .iter()
            .map(|p| element::reference_basis(p[0], p[1]))
            .collect();
        let pattern = Arc::new(Pattern::build(dofmap));
        Self {
            dofmap: Arc::clone(dofmap),
            quad,
            pattern,
            maps,
            ref_evals,
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.dofmap.mesh
    }

    pub fn element_map(&self, tri: usize) -> &ElementMap {
        &self.maps[tri]
    }

    fn element_qp(&self, tri: usize) -> ElementQp {
        let map = &self.maps[tri];
        let n = self.quad.len();
        let mut phys = Vec::with_capacity(n);
        let mut points = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for (q, rp) in self.quad.points.iter().enumerate() {
            phys.push(map.physical_basis_from_ref(&self.ref_evals[q]));
            points.push(map.to_physical(rp[0], rp[1]));
            weights.push(self.quad.weights[q] * map.det);
        }
        ElementQp { phys, points, weights }
    }

    /// Deterministic chunked element loop: per-element contributions are
    /// computed in parallel, then scattered serially in triangle order, so
    /// results are bitwise reproducible for any worker count.
    fn run_chunked<T: Send>(
        &self,
        per_tri: impl Fn(usize) -> T + Sync,
        mut scatter: impl FnMut(usize, T),
    ) {
        let n = self.dofmap.mesh.n_triangles();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let block: Vec<T> = (start..end).into_par_iter().map(&per_tri).collect();
            for (offset, item) in block.into_iter().enumerate() {
                scatter(start + offset, item);
            }
            start = end;
        }
    }

    fn scatter_local(&self, op: &mut SparseOperator, tri: usize, local: &Local) {
        let dofs = &self.dofmap.tri_dofs[tri];
        for i in 0..N_DOFS {
            let Some(r) = self.dofmap.free_of(dofs[i]) else { continue };
            for j in 0..N_DOFS {
                let Some(c) = self.dofmap.free_of(dofs[j]) else { continue };
                op.add_at(r, c, local[i][j]);
            }
        }
    }

    fn scatter_local_vec(&self, vec: &mut [f64], tri: usize, local: &[f64; N_DOFS]) {
        for (i, &g) in self.dofmap.tri_dofs[tri].iter().enumerate() {
            if let Some(r) = self.dofmap.free_of(g) {
                vec[r] += local[i];
            }
        }
    }

    /// a(psi, chi) = Re^{-1} int lap(psi) lap(chi).
    pub fn biharmonic(&self, params: FlowParams) -> SparseOperator {
        let re_inv = 1.0 / params.reynolds;
        let mut op = SparseOperator::zeros(Arc::clone(&self.pattern));
        op.symmetric = true;
        self.run_chunked(
            |tri| {
                let qp = self.element_qp(tri);
                let mut local = ZERO_LOCAL;
                for (q, w) in qp.weights.iter().enumerate() {
                    let e = &qp.phys[q];
                    for i in 0..N_DOFS {
                        let li = e.laplacian(i);
                        for j in 0..N_DOFS {
                            local[i][j] += w * re_inv * e.laplacian(j) * li;
                        }
                    }
                }
                local
            },
            |tri, local| self.scatter_local(&mut op, tri, &local),
        );
        op
    }

    /// c(psi, chi) = -Ro^{-1} int psi_x chi.
    pub fn beta_rotation(&self, params: FlowParams) -> SparseOperator {
        let ro_inv = 1.0 / params.rossby;
        let mut op = SparseOperator::zeros(Arc::clone(&self.pattern));
        self.run_chunked(
            |tri| {
                let qp = self.element_qp(tri);
                let mut local = ZERO_LOCAL;
                for (q, w) in qp.weights.iter().enumerate() {
                    let e = &qp.phys[q];
                    for i in 0..N_DOFS {
                        let vi = e.values[i];
                        for j in 0..N_DOFS {
                            local[i][j] -= w * ro_inv * e.gradients[j][0] * vi;
                        }
                    }
                }
                local
            },
            |tri, local| self.scatter_local(&mut op, tri, &local),
        );
        op
    }

    /// Laplacian of the convecting field at one physical quadrature point.
    fn convecting_laplacian(
        zeta: &Convecting,
        tri: usize,
        qp: &ElementQp,
        q: usize,
        local_zeta: &[f64; N_DOFS],
    ) -> f64 {
        match zeta {
            Convecting::Zero => 0.0,
            Convecting::Fine(_) => {
                let e = &qp.phys[q];
                (0..N_DOFS).map(|l| local_zeta[l] * e.laplacian(l)).sum()
            }
            Convecting::Coarse { field, parent_of } => {
                field.laplacian_in(parent_of[tri], qp.points[q])
            }
        }
    }

    /// b(zeta; psi, chi) = int lap(zeta) (psi_y chi_x - psi_x chi_y).
    pub fn jacobian_form(&self, zeta: &Convecting) -> SparseOperator {
        let mut op = SparseOperator::zeros(Arc::clone(&self.pattern));
        self.run_chunked(
            |tri| {
                let qp = self.element_qp(tri);
                let local_zeta = match zeta {
                    Convecting::Fine(sol) => sol.local_coefficients(tri),
                    _ => [0.0; N_DOFS],
                };
                let mut local = ZERO_LOCAL;
                for (q, w) in qp.weights.iter().enumerate() {
                    let lap_zeta = Self::convecting_laplacian(zeta, tri, &qp, q, &local_zeta);
                    if lap_zeta == 0.0 {
                        continue;
                    }
                    let e = &qp.phys[q];
                    for i in 0..N_DOFS {
                        let [gx_i, gy_i] = e.gradients[i];
                        for j in 0..N_DOFS {
                            let [gx_j, gy_j] = e.gradients[j];
                            local[i][j] += w * lap_zeta * (gy_j * gx_i - gx_j * gy_i);
                        }
                    }
                }
                local
            },
            |tri, local| self.scatter_local(&mut op, tri, &local),
        );
        op
    }

    /// l(chi) = Ro^{-1} int F chi.
    pub fn load(&self, forcing: &(dyn Fn(Point2) -> f64 + Sync), params: FlowParams) -> Vec<f64> {
        let ro_inv = 1.0 / params.rossby;
        let mut vec = vec![0.0; self.dofmap.n_free];
        self.run_chunked(
            |tri| {
                let qp = self.element_qp(tri);
                let mut local = [0.0; N_DOFS];
                for (q, w) in qp.weights.iter().enumerate() {
                    let fv = forcing(qp.points[q]);
                    let e = &qp.phys[q];
                    for i in 0..N_DOFS {
                        local[i] += w * ro_inv * fv * e.values[i];
                    }
                }
                local
            },
            |tri, local| self.scatter_local_vec(&mut vec, tri, &local),
        );
        vec
    }

    /// Newton linearization around `current`: returns the Jacobian
    /// J = A + B(psi) + B'(.; psi) + C and the residual
    /// r = L - [A psi + b(psi; psi, .) + C psi].
    pub fn newton_system(
        &self,
        current: &Solution,
        a: &SparseOperator,
        c: &SparseOperator,
        load: &[f64],
    ) -> (SparseOperator, Vec<f64>) {
        let mut jac = SparseOperator::zeros(Arc::clone(&self.pattern));
        let mut b_psi = vec![0.0; self.dofmap.n_free];
        self.run_chunked(
            |tri| {
                let qp = self.element_qp(tri);
                let local_psi = current.local_coefficients(tri);
                let mut local = ZERO_LOCAL;
                let mut local_vec = [0.0; N_DOFS];
                for (q, w) in qp.weights.iter().enumerate() {
                    let e = &qp.phys[q];
                    let (mut psi_x, mut psi_y, mut lap_psi) = (0.0, 0.0, 0.0);
                    for l in 0..N_DOFS {
                        psi_x += local_psi[l] * e.gradients[l][0];
                        psi_y += local_psi[l] * e.gradients[l][1];
                        lap_psi += local_psi[l] * e.laplacian(l);
                    }
                    for i in 0..N_DOFS {
                        let [gx_i, gy_i] = e.gradients[i];
                        let advect_i = psi_y * gx_i - psi_x * gy_i;
                        // b(psi; psi, chi_i), accumulated as a vector.
                        local_vec[i] += w * lap_psi * advect_i;
                        for j in 0..N_DOFS {
                            let [gx_j, gy_j] = e.gradients[j];
                            // B(psi)[i][j] + B'(.; psi)[i][j]
                            local[i][j] += w
                                * (lap_psi * (gy_j * gx_i - gx_j * gy_i)
                                    + e.laplacian(j) * advect_i);
                        }
                    }
                }
                (local, local_vec)
            },
            |tri, (local, local_vec)| {
                self.scatter_local(&mut jac, tri, &local);
                self.scatter_local_vec(&mut b_psi, tri, &local_vec);
            },
        );
        jac.add_scaled(a, 1.0);
        jac.add_scaled(c, 1.0);
        let linear = {
            let mut ax = a.matvec(&current.coefficients);
            let cx = c.matvec(&current.coefficients);
            for (a, c) in ax.iter_mut().zip(&cx) {
                *a += c;
            }
            ax
        };
        let residual = load
            .iter()
            .zip(linear.iter().zip(&b_psi))
            .map(|(l, (lin, b))| l - lin - b)
            .collect();
        (jac, residual)
    }
}

/// Builds a one-off assembler; studies keep a long-lived [`Assembler`].
pub fn assemble_biharmonic(
    dofmap: &Arc<DofMap>,
    params: FlowParams,
    quad: &QuadratureRule,
) -> SparseOperator {
    Assembler::new(dofmap, quad.clone()).biharmonic(params)
}

pub fn assemble_beta(
    dofmap: &Arc<DofMap>,
    params: FlowParams,
    quad: &QuadratureRule,
) -> SparseOperator {
    Assembler::new(dofmap, quad.clone()).beta_rotation(params)
}

pub fn assemble_jacobian_form(
    dofmap: &Arc<DofMap>,
    zeta: &Convecting,
    quad: &QuadratureRule,
) -> SparseOperator {
    Assembler::new(dofmap, quad.clone()).jacobian_form(zeta)
}

pub fn assemble_load(
    dofmap: &Arc<DofMap>,
    forcing: &(dyn Fn(Point2) -> f64 + Sync),
    params: FlowParams,
    quad: &QuadratureRule,
) -> Vec<f64> {
    Assembler::new(dofmap, quad.clone()).load(forcing, params)
}

/// The auxiliary trilinear form
/// b0(xi; chi, psi) = int (xi_y chi_xy - xi_x chi_yy) psi_y
///                  - (xi_x chi_xy - xi_y chi_xx) psi_x.
pub fn eval_b0(xi: &Solution, chi: &Solution, psi: &Solution, quad: &QuadratureRule) -> f64 {
    assert!(Arc::ptr_eq(&xi.mesh, &chi.mesh) && Arc::ptr_eq(&xi.mesh, &psi.mesh));
    integrate_triple(xi, chi, psi, quad, |x, c, p| {
        (x[2] * c[4] - x[1] * c[5]) * p[2] - (x[1] * c[4] - x[2] * c[3]) * p[1]
    })
}

/// The trilinear form b(zeta; psi, chi) = int lap(zeta) (psi_y chi_x - psi_x chi_y),
/// evaluated as a scalar by quadrature (independent of the matrix assembly path).
pub fn eval_b(zeta: &Solution, psi: &Solution, chi: &Solution, quad: &QuadratureRule) -> f64 {
    assert!(Arc::ptr_eq(&zeta.mesh, &psi.mesh) && Arc::ptr_eq(&zeta.mesh, &chi.mesh));
    integrate_triple(zeta, psi, chi, quad, |z, p, c| {
        (z[3] + z[5]) * (p[2] * c[1] - p[1] * c[2])
    })
}

pub(crate) fn integrate_triple(
    u: &Solution,
    v: &Solution,
    w: &Solution,
    quad: &QuadratureRule,
    integrand: impl Fn(&[f64; 6], &[f64; 6], &[f64; 6]) -> f64 + Sync,
) -> f64 {
    let fu = FieldEval::new(u);
    let fv = FieldEval::new(v);
    let fw = FieldEval::new(w);
    let mesh = &u.mesh;
    let maps = element_maps(&u.dofmap);
    (0..mesh.n_triangles())
        .into_par_iter()
        .map(|t| {
            let map = &maps[t];
            let mut acc = 0.0;
            for (rp, rw) in quad.points.iter().zip(&quad.weights) {
                let p = map.to_physical(rp[0], rp[1]);
                let eu = fu.eval_in(t, p);
                let ev = fv.eval_in(t, p);
                let ew = fw.eval_in(t, p);
                acc += rw * map.det * integrand(&eu, &ev, &ew);
            }
            acc
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_rect_mesh, point_in_triangle, Rect};
    use crate::quadrature::rule_for_degree;

    fn setup(h: f64) -> (Arc<DofMap>, Assembler) {
        let mesh = generate_rect_mesh(Rect::unit_square(), h).unwrap();
        let dofmap = build_dof_map(&mesh);
        let quad = rule_for_degree(14).unwrap();
        let asm = Assembler::new(&dofmap, quad);
        (dofmap, asm)
    }

    fn params(re: f64, ro: f64) -> FlowParams {
        FlowParams::new(re, ro).unwrap()
    }

    /// Separable clamped bump sin^(2)(ax x) sin^(2)(ay y) with derivatives.
    fn sin2_product(ax: f64, ay: f64) -> impl Fn(Point2) -> [f64; 6] + Sync {
        move |p: Point2| {
            let u = (ax * p.x).sin().powi(2);
            let du = ax * (2.0 * ax * p.x).sin();
            let ddu = 2.0 * ax * ax * (2.0 * ax * p.x).cos();
            let v = (ay * p.y).sin().powi(2);
            let dv = ay * (2.0 * ay * p.y).sin();
            let ddv = 2.0 * ay * ay * (2.0 * ay * p.y).cos();
            [u * v, du * v, u * dv, ddu * v, du * dv, u * ddv]
        }
    }

    #[test]
    fn dof_counts_on_coarse_unit_squares() {
        // h = 1/2: 9 vertices, 16 edges -> 70 total DoFs. Free: the one
        // interior vertex (6), one normal-normal curvature per non-corner
        // boundary vertex (4), and 8 interior edges.
        let (dofmap, _) = setup(0.5);
        assert_eq!(dofmap.n_total(), 70);
        assert_eq!(dofmap.n_free, 18);

        // h = 1/4: 25 vertices, 56 edges; 9 interior vertices, 12 non-corner
        // boundary vertices, 40 interior edges -> 54 + 12 + 40 free.
        let (dofmap, _) = setup(0.25);
        assert_eq!(dofmap.n_total(), 6 * 25 + 56);
        assert_eq!(dofmap.n_free, 106);
    }

    #[test]
    fn constrained_set_follows_side_orientation() {
        let (dofmap, _) = setup(0.5);
        let mesh = &dofmap.mesh;
        for (v, p) in mesh.vertices.iter().enumerate() {
            let on_h = p.y == 0.0 || p.y == 1.0;
            let on_v = p.x == 0.0 || p.x == 1.0;
            let expect = |m: usize| match m {
                0 | 1 | 2 | 4 => on_h || on_v,
                3 => on_h,
                5 => on_v,
                _ => unreachable!(),
            };
            for m in 0..6 {
                assert_eq!(
                    dofmap.constrained[6 * v + m],
                    expect(m),
                    "vertex {v} at ({}, {}), component {m}",
                    p.x,
                    p.y
                );
            }
        }
    }

    #[test]
    fn biharmonic_is_symmetric_positive_definite_and_scales_with_re() {
        let (_, asm) = setup(0.25);
        let a = asm.biharmonic(params(1.0, 1.0));
        assert!(a.asymmetry() <= 1e-10 * a.max_abs(), "asymmetry {}", a.asymmetry());

        let eig = a.to_dense().symmetric_eigenvalues();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0, "smallest eigenvalue {min}");

        let a2 = asm.biharmonic(params(2.0, 1.0));
        for (x, y) in a.values.iter().zip(&a2.values) {
            assert!((x - 2.0 * y).abs() <= 1e-12 * a.max_abs());
        }
    }

    #[test]
    fn beta_rotation_is_skew_and_scales_with_ro() {
        let (_, asm) = setup(0.25);
        let c = asm.beta_rotation(params(1.0, 1.0));
        assert!(c.max_abs() > 0.0);
        assert!(c.skew_defect() <= 1e-10 * c.max_abs(), "defect {}", c.skew_defect());

        let c2 = asm.beta_rotation(params(1.0, 2.0));
        for (x, y) in c.values.iter().zip(&c2.values) {
            assert!((x - 2.0 * y).abs() <= 1e-12 * c.max_abs());
        }
    }

    #[test]
    fn jacobian_form_vanishes_for_zero_field_and_is_skew() {
        let (dofmap, asm) = setup(0.25);
        let zero = Solution::zeros(&dofmap);
        let b0 = asm.jacobian_form(&Convecting::Fine(&zero));
        assert_eq!(b0.max_abs(), 0.0);
        assert_eq!(asm.jacobian_form(&Convecting::Zero).max_abs(), 0.0);

        let pi = std::f64::consts::PI;
        let zeta = interpolate(&dofmap, &sin2_product(pi, 2.0 * pi));
        let b = asm.jacobian_form(&Convecting::Fine(&zeta));
        assert!(b.max_abs() > 0.0);
        // chi^T B(zeta) chi = 0 for every chi: B is skew-symmetric.
        assert!(b.skew_defect() <= 1e-10 * b.max_abs(), "defect {}", b.skew_defect());
    }

    #[test]
    fn jacobian_form_matrix_matches_scalar_quadrature() {
        let (dofmap, asm) = setup(0.25);
        let pi = std::f64::consts::PI;
        let zeta = interpolate(&dofmap, &sin2_product(pi, pi));
        let psi = interpolate(&dofmap, &sin2_product(2.0 * pi, pi));
        let chi = interpolate(&dofmap, &sin2_product(pi, 2.0 * pi));

        let b = asm.jacobian_form(&Convecting::Fine(&zeta));
        // (B psi)_i = b(zeta; psi, phi_i), so chi^T B psi = b(zeta; psi, chi).
        let matrix_value = dot(&chi.coefficients, &b.matvec(&psi.coefficients));
        let scalar_value = eval_b(&zeta, &psi, &chi, &asm.quad);
        assert!(scalar_value.abs() > 1e-6, "degenerate test value {scalar_value}");
        let rel = (matrix_value - scalar_value).abs() / scalar_value.abs();
        assert!(rel <= 1e-10, "rel {rel:.3e}");
    }

    #[test]
    fn trilinear_permutation_identity() {
        // b(psi; xi, chi) = b0(chi; xi, psi) - b0(xi; chi, psi) for clamped
        // C1 fields; both sides by quadrature that is exact at this degree.
        // (Sign verified independently by symbolic integration by parts.)
        let (dofmap, asm) = setup(0.25);
        let pi = std::f64::consts::PI;
        let xi = interpolate(&dofmap, &sin2_product(pi, pi));
        let chi = interpolate(&dofmap, &sin2_product(2.0 * pi, pi));
        let psi = interpolate(&dofmap, &sin2_product(pi, 2.0 * pi));

        let lhs = eval_b(&psi, &xi, &chi, &asm.quad);
        let rhs = eval_b0(&chi, &xi, &psi, &asm.quad) - eval_b0(&xi, &chi, &psi, &asm.quad);
        assert!(lhs.abs() > 1e-6, "degenerate test value {lhs}");
        let rel = (lhs - rhs).abs() / lhs.abs();
        assert!(rel <= 1e-8, "lhs {lhs:.6e} rhs {rhs:.6e} rel {rel:.3e}");
    }

    #[test]
    fn b0_vanishes_for_zero_first_argument() {
        let (dofmap, asm) = setup(0.25);
        let zero = Solution::zeros(&dofmap);
        let pi = std::f64::consts::PI;
        let chi = interpolate(&dofmap, &sin2_product(pi, pi));
        let psi = interpolate(&dofmap, &sin2_product(2.0 * pi, pi));
        assert_eq!(eval_b0(&zero, &chi, &psi, &asm.quad), 0.0);
    }

    #[test]
    fn b0_matches_dense_riemann_sum() {
        let (dofmap, asm) = setup(0.25);
        let pi = std::f64::consts::PI;
        let xi = interpolate(&dofmap, &sin2_product(pi, pi));
        let chi = interpolate(&dofmap, &sin2_product(2.0 * pi, pi));
        let psi = interpolate(&dofmap, &sin2_product(pi, 2.0 * pi));

        let quad_value = eval_b0(&xi, &chi, &psi, &asm.quad);
        assert!(quad_value.abs() > 1e-6, "degenerate test value {quad_value}");

        // Dense Riemann sum with > 1e6 equal-area samples: each of the 32
        // elements is split into m^2 congruent sub-triangles sampled at their
        // centroids, so every sample stays inside one element where the
        // integrand is smooth (the second derivatives jump across edges).
        let mesh = &dofmap.mesh;
        let (fx, fc, fp) = (FieldEval::new(&xi), FieldEval::new(&chi), FieldEval::new(&psi));
        let maps = element_maps(&dofmap);
        let m = 177usize; // 32 * 177^2 = 1_002_528 points
        assert!(mesh.n_triangles() * m * m >= 1_000_000);
        let sum: f64 = (0..mesh.n_triangles())
            .into_par_iter()
            .map(|tri| {
                let map = &maps[tri];
                let subarea = mesh.triangle_area(tri) / (m * m) as f64;
                let mut acc = 0.0;
                let mf = m as f64;
                let mut sample = |bx: f64, by: f64| {
                    let p = map.to_physical(bx, by);
                    debug_assert!(point_in_triangle(p, &mesh.triangles[tri], mesh));
                    let ex = fx.eval_in(tri, p);
                    let ec = fc.eval_in(tri, p);
                    let ep = fp.eval_in(tri, p);
                    acc += (ex[2] * ec[4] - ex[1] * ec[5]) * ep[2]
                        - (ex[1] * ec[4] - ex[2] * ec[3]) * ep[1];
                };
                for i in 0..m {
                    for j in 0..m - i {
                        // "Up" sub-triangle centroid.
                        sample((3 * i + 1) as f64 / (3.0 * mf), (3 * j + 1) as f64 / (3.0 * mf));
                        if i + j < m - 1 {
                            // "Down" sub-triangle centroid.
                            sample(
                                (3 * i + 2) as f64 / (3.0 * mf),
                                (3 * j + 2) as f64 / (3.0 * mf),
                            );
                        }
                    }
                }
                acc * subarea
            })
            .sum();
        let rel = (sum - quad_value).abs() / quad_value.abs();
        assert!(rel <= 1e-4, "quad {quad_value:.8e} riemann {sum:.8e} rel {rel:.3e}");
    }

    #[test]
    fn load_zero_forcing_and_ro_scaling() {
        let (_, asm) = setup(0.25);
        let l0 = asm.load(&|_| 0.0, params(1.0, 1.0));
        assert!(l0.iter().all(|v| *v == 0.0));

        let l1 = asm.load(&|_| 1.0, params(1.0, 1.0));
        let l2 = asm.load(&|_| 1.0, params(1.0, 2.0));
        let max = l1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.0);
        for (a, b) in l1.iter().zip(&l2) {
            assert!((a - 2.0 * b).abs() <= 1e-13 * max);
        }
    }

    #[test]
    fn load_pairs_exactly_with_a_clamped_bump_interpolant() {
        // With F = 1, L^T c = Ro^{-1} int chi for the piecewise-quintic
        // chi with coefficients c. The load uses the degree-14 rule; the
        // oracle integrates chi elementwise with an independent degree-7
        // rule, which is also exact for quintics.
        let (dofmap, asm) = setup(0.25);
        let bump = |p: Point2| {
            let w = |t: f64| (t * (1.0 - t)).powi(2);
            let dw = |t: f64| 2.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
            let ddw = |t: f64| 2.0 * (1.0 - 6.0 * t + 6.0 * t * t);
            [
                w(p.x) * w(p.y),
                dw(p.x) * w(p.y),
                w(p.x) * dw(p.y),
                ddw(p.x) * w(p.y),
                dw(p.x) * dw(p.y),
                w(p.x) * ddw(p.y),
            ]
        };
        let chi = interpolate(&dofmap, &bump);
        let ro = 0.5;
        let l = asm.load(&|_| 1.0, params(1.0, ro));
        let paired = dot(&l, &chi.coefficients);

        let oracle_rule = rule_for_degree(7).unwrap();
        let field = FieldEval::new(&chi);
        let maps = element_maps(&dofmap);
        let integral: f64 = (0..dofmap.mesh.n_triangles())
            .map(|t| {
                oracle_rule
                    .points
                    .iter()
                    .zip(&oracle_rule.weights)
                    .map(|(rp, rw)| {
                        let p = maps[t].to_physical(rp[0], rp[1]);
                        rw * maps[t].det * field.eval_in(t, p)[0]
                    })
                    .sum::<f64>()
            })
            .sum();
        let expected = integral / ro;
        let rel = (paired - expected).abs() / expected.abs();
        assert!(rel <= 1e-10, "paired {paired:.8e} expected {expected:.8e} rel {rel:.3e}");
    }

    #[test]
    fn newton_jacobian_matches_directional_differences() {
        let (dofmap, asm) = setup(0.125);
        let p = params(1.0, 1.0);
        let a = asm.biharmonic(p);
        let c = asm.beta_rotation(p);
        let l = asm.load(&|q: Point2| (q.x * q.y).sin(), p);

        let pi = std::f64::consts::PI;
        let psi = interpolate(&dofmap, &sin2_product(pi, 2.0 * pi));
        let delta = interpolate(&dofmap, &sin2_product(2.0 * pi, pi));
        let (jac, r0) = asm.newton_system(&psi, &a, &c, &l);
        let j_delta = jac.matvec(&delta.coefficients);

        let mut remainders = Vec::new();
        for eps in [1e-3, 1e-4, 1e-5] {
            let shifted: Vec<f64> = psi
                .coefficients
                .iter()
                .zip(&delta.coefficients)
                .map(|(p, d)| p + eps * d)
                .collect();
            let shifted = Solution::new(&dofmap, shifted);
            let (_, r_eps) = asm.newton_system(&shifted, &a, &c, &l);
            let remainder: f64 = r_eps
                .iter()
                .zip(r0.iter().zip(&j_delta))
                .map(|(re, (r0, jd))| (re - r0 + eps * jd).powi(2))
                .sum::<f64>()
                .sqrt();
            remainders.push(remainder);
        }
        for k in 0..remainders.len() - 1 {
            let order = (remainders[k] / remainders[k + 1]).log10();
            assert!(order >= 1.9, "orders {remainders:?}, step {k}: {order:.3}");
        }
    }

    #[test]
    fn newton_residual_is_load_at_zero_state() {
        let (dofmap, asm) = setup(0.25);
        let p = params(1.0, 1.0);
        let a = asm.biharmonic(p);
        let c = asm.beta_rotation(p);
        let l = asm.load(&|q: Point2| q.x + q.y, p);
        let zero = Solution::zeros(&dofmap);
        let (jac, r) = asm.newton_system(&zero, &a, &c, &l);
        for ((ri, li), (ja, (av, cv))) in r
            .iter()
            .zip(&l)
            .zip(jac.values.iter().zip(a.values.iter().zip(&c.values)))
        {
            assert_eq!(ri, li);
            // With psi = 0 the nonlinear blocks vanish: J = A + C.
            assert!((ja - av - cv).abs() <= 1e-14 * a.max_abs());
        }
    }

    #[test]
    fn interpolant_evaluates_near_the_sampled_function() {
        let mesh = generate_rect_mesh(Rect::unit_square(), 0.125).unwrap();
        let dofmap = build_dof_map(&mesh);
        let pi = std::f64::consts::PI;
        let g = sin2_product(pi, pi);
        let sol = interpolate(&dofmap, &g);
        for (x, y) in [(0.31, 0.47), (0.05, 0.9), (0.66, 0.13)] {
            let p = Point2::new(x, y);
            let got = sol.eval(p).unwrap();
            let want = g(p);
            assert!(
                (got[0] - want[0]).abs() <= 1e-4,
                "value at ({x}, {y}): {} vs {}",
                got[0],
                want[0]
            );
        }
    }

    #[test]
    fn matvec_matches_dense_product() {
        let (dofmap, asm) = setup(0.5);
        let a = asm.biharmonic(params(3.0, 1.0));
        let x: Vec<f64> = (0..dofmap.n_free).map(|i| (i as f64 * 0.7).sin()).collect();
        let sparse = a.matvec(&x);
        let dense = a.to_dense() * nalgebra::DVector::from_column_slice(&x);
        for (s, d) in sparse.iter().zip(dense.iter()) {
            assert!((s - d).abs() <= 1e-12 * a.max_abs());
        }
    }
}
