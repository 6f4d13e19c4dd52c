//! The 21-DoF quintic Argyris triangle.
//!
//! Per element the degrees of freedom are, in order: for each of the three
//! vertices the value, first derivatives (dx, dy), and second derivatives
//! (dxx, dxy, dyy); then one normal derivative at each of the three edge
//! midpoints. Edge k is the edge opposite vertex k, and its normal is the
//! clockwise rotation of the unit tangent running from the lower-numbered
//! endpoint to the higher-numbered one, so that two triangles sharing an edge
//! agree on the sign of the shared DoF.
//!
//! The reference basis is obtained by inverting the 21x21 system of nodal
//! functionals against the quintic monomials. Argyris is not affine
//! equivalent, so each physical element carries a 21x21 DoF transformation
//! built by applying the physical nodal functionals to the pushed-forward
//! reference basis and inverting.

use std::sync::OnceLock;

use nalgebra::SMatrix;

use crate::error::{Error, Result};
use crate::mesh::Point2;

pub const N_DOFS: usize = 21;

type Mat21 = SMatrix<f64, 21, 21>;

/// The kind of nodal functional attached to a DoF.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofKind {
    VertexValue,
    VertexDx,
    VertexDy,
    VertexDxx,
    VertexDxy,
    VertexDyy,
    EdgeNormalDerivative,
}

/// One of the 21 element DoFs: a functional kind plus the vertex or edge it
/// is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofDescriptor {
    pub kind: DofKind,
    /// Vertex index 0..2 for vertex DoFs, edge index 0..2 for edge DoFs.
    pub location: usize,
}

pub fn dof_descriptors() -> [DofDescriptor; N_DOFS] {
    let mut out = [DofDescriptor { kind: DofKind::VertexValue, location: 0 }; N_DOFS];
    let kinds = [
        DofKind::VertexValue,
        DofKind::VertexDx,
        DofKind::VertexDy,
        DofKind::VertexDxx,
        DofKind::VertexDxy,
        DofKind::VertexDyy,
    ];
    for v in 0..3 {
        for (m, kind) in kinds.iter().enumerate() {
            out[6 * v + m] = DofDescriptor { kind: *kind, location: v };
        }
    }
    for e in 0..3 {
        out[18 + e] = DofDescriptor { kind: DofKind::EdgeNormalDerivative, location: e };
    }
    out
}

/// Values, gradients, and Hessians (dxx, dxy, dyy) of the 21 shape functions
/// at a single evaluation point.
#[derive(Debug, Clone)]
pub struct BasisEval {
    pub values: [f64; N_DOFS],
    pub gradients: [[f64; 2]; N_DOFS],
    pub hessians: [[f64; 3]; N_DOFS],
}

impl BasisEval {
    fn zeros() -> Self {
        Self {
            values: [0.0; N_DOFS],
            gradients: [[0.0; 2]; N_DOFS],
            hessians: [[0.0; 3]; N_DOFS],
        }
    }

    pub fn laplacian(&self, i: usize) -> f64 {
        self.hessians[i][0] + self.hessians[i][2]
    }
}

/// Exponent pairs of the quintic monomial basis x^a y^b, a + b <= 5.
const MONOMIALS: [(i32, i32); N_DOFS] = [
    (0, 0),
    (1, 0), (0, 1),
    (2, 0), (1, 1), (0, 2),
    (3, 0), (2, 1), (1, 2), (0, 3),
    (4, 0), (3, 1), (2, 2), (1, 3), (0, 4),
    (5, 0), (4, 1), (3, 2), (2, 3), (1, 4), (0, 5),
];

fn int_pow(x: f64, e: i32) -> f64 {
    if e < 0 { 0.0 } else { x.powi(e) }
}

/// Value, gradient, and Hessian of every quintic monomial at (x, y).
pub(crate) fn monomial_table(x: f64, y: f64) -> BasisEval {
    let mut out = BasisEval::zeros();
    for (j, &(a, b)) in MONOMIALS.iter().enumerate() {
        let (af, bf) = (a as f64, b as f64);
        out.values[j] = int_pow(x, a) * int_pow(y, b);
        out.gradients[j] = [
            af * int_pow(x, a - 1) * int_pow(y, b),
            bf * int_pow(x, a) * int_pow(y, b - 1),
        ];
        out.hessians[j] = [
            af * (af - 1.0) * int_pow(x, a - 2) * int_pow(y, b),
            af * bf * int_pow(x, a - 1) * int_pow(y, b - 1),
            bf * (bf - 1.0) * int_pow(x, a) * int_pow(y, b - 2),
        ];
    }
    out
}

const REF_VERTICES: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
const REF_MIDPOINTS: [[f64; 2]; 3] = [[0.5, 0.5], [0.0, 0.5], [0.5, 0.0]];

/// Edge endpoints as local vertex indices in ascending order; edge k is
/// opposite vertex k.
const EDGE_ENDPOINTS: [[usize; 2]; 3] = [[1, 2], [0, 2], [0, 1]];

fn ref_edge_normals() -> [[f64; 2]; 3] {
    let mut out = [[0.0; 2]; 3];
    for k in 0..3 {
        let [lo, hi] = EDGE_ENDPOINTS[k];
        let t = [
            REF_VERTICES[hi][0] - REF_VERTICES[lo][0],
            REF_VERTICES[hi][1] - REF_VERTICES[lo][1],
        ];
        let len = t[0].hypot(t[1]);
        out[k] = [t[1] / len, -t[0] / len];
    }
    out
}

/// Polished inverse: a plain LU inverse followed by two Newton refinement
/// steps, which brings the residual down to a few ulps.
fn refined_inverse(m: &Mat21) -> Option<Mat21> {
    let mut inv = m.try_inverse()?;
    for _ in 0..2 {
        let r = Mat21::identity() * 2.0 - m * inv;
        inv *= r;
    }
    Some(inv)
}

fn reference_coefficients() -> &'static Mat21 {
    static COEFFS: OnceLock<Mat21> = OnceLock::new();
    COEFFS.get_or_init(|| {
        // V[k][j] = (functional k)(monomial j).
        let mut v = Mat21::zeros();
        for (i, p) in REF_VERTICES.iter().enumerate() {
            let m = monomial_table(p[0], p[1]);
            for j in 0..N_DOFS {
                v[(6 * i, j)] = m.values[j];
                v[(6 * i + 1, j)] = m.gradients[j][0];
                v[(6 * i + 2, j)] = m.gradients[j][1];
                v[(6 * i + 3, j)] = m.hessians[j][0];
                v[(6 * i + 4, j)] = m.hessians[j][1];
                v[(6 * i + 5, j)] = m.hessians[j][2];
            }
        }
        let normals = ref_edge_normals();
        for (k, p) in REF_MIDPOINTS.iter().enumerate() {
            let m = monomial_table(p[0], p[1]);
            for j in 0..N_DOFS {
                v[(18 + k, j)] =
                    normals[k][0] * m.gradients[j][0] + normals[k][1] * m.gradients[j][1];
            }
        }
        let vinv = refined_inverse(&v).expect("Argyris nodal system must be invertible");
        // Shape i = sum_j coeffs[i][j] * monomial j, so coeffs = V^{-T}.
        vinv.transpose()
    })
}

/// The 21 reference shape functions at a reference point. The Kronecker
/// property holds against the reference nodal functionals.
pub fn reference_basis(x: f64, y: f64) -> BasisEval {
    let coeffs = reference_coefficients();
    let m = monomial_table(x, y);
    let mut out = BasisEval::zeros();
    for i in 0..N_DOFS {
        let (mut v, mut gx, mut gy) = (0.0, 0.0, 0.0);
        let (mut hxx, mut hxy, mut hyy) = (0.0, 0.0, 0.0);
        for j in 0..N_DOFS {
            let c = coeffs[(i, j)];
            v += c * m.values[j];
            gx += c * m.gradients[j][0];
            gy += c * m.gradients[j][1];
            hxx += c * m.hessians[j][0];
            hxy += c * m.hessians[j][1];
            hyy += c * m.hessians[j][2];
        }
        out.values[i] = v;
        out.gradients[i] = [gx, gy];
        out.hessians[i] = [hxx, hxy, hyy];
    }
    out
}

/// Affine map and DoF transformation of one physical triangle.
#[derive(Debug, Clone)]
pub struct ElementMap {
    pub vertices: [Point2; 3],
    pub jacobian: [[f64; 2]; 2],
    pub jacobian_inv: [[f64; 2]; 2],
    pub det: f64,
    /// Physical unit normals of the three element edges.
    pub edge_normals: [[f64; 2]; 3],
    /// M with physical shape i = sum_j M[i][j] (reference shape j o F^{-1}).
    dof_transform: Box<Mat21>,
}

impl ElementMap {
    /// Builds the map with edge normals from the local ascending-index
    /// convention. Suitable for standalone elements; meshes pass flips.
    pub fn new(vertices: [Point2; 3]) -> Result<Self> {
        Self::with_edge_flips(vertices, [false; 3])
    }

    /// `edge_flips[k]` is set when the global ascending-vertex-id direction of
    /// edge k is opposite to the local ascending-index direction.
    pub fn with_edge_flips(vertices: [Point2; 3], edge_flips: [bool; 3]) -> Result<Self> {
        let jacobian = [
            [vertices[1].x - vertices[0].x, vertices[2].x - vertices[0].x],
            [vertices[1].y - vertices[0].y, vertices[2].y - vertices[0].y],
        ];
        let det = jacobian[0][0] * jacobian[1][1] - jacobian[0][1] * jacobian[1][0];
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "degenerate or misoriented triangle, jacobian determinant {det}"
            )));
        }
        let jacobian_inv = [
            [jacobian[1][1] / det, -jacobian[0][1] / det],
            [-jacobian[1][0] / det, jacobian[0][0] / det],
        ];
        let mut edge_normals = [[0.0; 2]; 3];
        for k in 0..3 {
            let [lo, hi] = EDGE_ENDPOINTS[k];
            let t = [vertices[hi].x - vertices[lo].x, vertices[hi].y - vertices[lo].y];
            let len = t[0].hypot(t[1]);
            let sign = if edge_flips[k] { -1.0 } else { 1.0 };
            edge_normals[k] = [sign * t[1] / len, -sign * t[0] / len];
        }

        // C[k][j] = (physical functional k)(reference shape j o F^{-1}).
        let jit = transpose2(jacobian_inv);
        let mut c = Mat21::zeros();
        for (i, p) in REF_VERTICES.iter().enumerate() {
            let e = reference_basis(p[0], p[1]);
            for j in 0..N_DOFS {
                let g = apply2(jit, e.gradients[j]);
                let h = congruence(jit, e.hessians[j]);
                c[(6 * i, j)] = e.values[j];
                c[(6 * i + 1, j)] = g[0];
                c[(6 * i + 2, j)] = g[1];
                c[(6 * i + 3, j)] = h[0];
                c[(6 * i + 4, j)] = h[1];
                c[(6 * i + 5, j)] = h[2];
            }
        }
        for (k, p) in REF_MIDPOINTS.iter().enumerate() {
            let e = reference_basis(p[0], p[1]);
            let n = edge_normals[k];
            for j in 0..N_DOFS {
                let g = apply2(jit, e.gradients[j]);
                c[(18 + k, j)] = n[0] * g[0] + n[1] * g[1];
            }
        }
        let m = refined_inverse(&c.transpose()).ok_or_else(|| {
            Error::InvalidArgument("singular Argyris DoF transformation".into())
        })?;
        Ok(Self {
            vertices,
            jacobian,
            jacobian_inv,
            det,
            edge_normals,
            dof_transform: Box::new(m),
        })
    }

    pub fn dof_transform(&self) -> &SMatrix<f64, 21, 21> {
        &self.dof_transform
    }

    /// Physical point of a reference point.
    pub fn to_physical(&self, xi: f64, eta: f64) -> Point2 {
        Point2::new(
            self.vertices[0].x + self.jacobian[0][0] * xi + self.jacobian[0][1] * eta,
            self.vertices[0].y + self.jacobian[1][0] * xi + self.jacobian[1][1] * eta,
        )
    }

    /// Reference point of a physical point.
    pub fn to_reference(&self, p: Point2) -> [f64; 2] {
        let d = [p.x - self.vertices[0].x, p.y - self.vertices[0].y];
        apply2(self.jacobian_inv, d)
    }

    /// Pushes a reference-basis evaluation forward through the affine map
    /// (values unchanged, derivatives by the chain rule), without the DoF
    /// transformation. Entry j is reference shape j o F^{-1}.
    pub fn pushforward(&self, ref_eval: &BasisEval) -> BasisEval {
        let jit = transpose2(self.jacobian_inv);
        let mut out = BasisEval::zeros();
        for j in 0..N_DOFS {
            out.values[j] = ref_eval.values[j];
            out.gradients[j] = apply2(jit, ref_eval.gradients[j]);
            out.hessians[j] = congruence(jit, ref_eval.hessians[j]);
        }
        out
    }

    /// The 21 physical shape functions from a reference-basis evaluation at
    /// the matching reference point.
    pub fn physical_basis_from_ref(&self, ref_eval: &BasisEval) -> BasisEval {
        let pushed = self.pushforward(ref_eval);
        let m = &self.dof_transform;
        let mut out = BasisEval::zeros();
        for i in 0..N_DOFS {
            let (mut v, mut gx, mut gy) = (0.0, 0.0, 0.0);
            let (mut hxx, mut hxy, mut hyy) = (0.0, 0.0, 0.0);
            for j in 0..N_DOFS {
                let c = m[(i, j)];
                v += c * pushed.values[j];
                gx += c * pushed.gradients[j][0];
                gy += c * pushed.gradients[j][1];
                hxx += c * pushed.hessians[j][0];
                hxy += c * pushed.hessians[j][1];
                hyy += c * pushed.hessians[j][2];
            }
            out.values[i] = v;
            out.gradients[i] = [gx, gy];
            out.hessians[i] = [hxx, hxy, hyy];
        }
        out
    }

    /// The 21 physical shape functions at a physical point.
    pub fn physical_basis(&self, p: Point2) -> BasisEval {
        let [xi, eta] = self.to_reference(p);
        self.physical_basis_from_ref(&reference_basis(xi, eta))
    }

    /// Local interpolation DoFs of a smooth function given by
    /// [value, dx, dy, dxx, dxy, dyy] evaluations.
    pub fn interpolate_local(&self, f: &dyn Fn(Point2) -> [f64; 6]) -> [f64; N_DOFS] {
        let mut c = [0.0; N_DOFS];
        for (i, v) in self.vertices.iter().enumerate() {
            let d = f(*v);
            c[6 * i..6 * i + 6].copy_from_slice(&d);
        }
        for k in 0..3 {
            let [lo, hi] = EDGE_ENDPOINTS[k];
            let m = Point2::new(
                0.5 * (self.vertices[lo].x + self.vertices[hi].x),
                0.5 * (self.vertices[lo].y + self.vertices[hi].y),
            );
            let d = f(m);
            c[18 + k] = self.edge_normals[k][0] * d[1] + self.edge_normals[k][1] * d[2];
        }
        c
    }
}

/// Edge midpoint of local edge k in physical coordinates.
pub fn edge_midpoint(vertices: &[Point2; 3], k: usize) -> Point2 {
    let [lo, hi] = EDGE_ENDPOINTS[k];
    Point2::new(
        0.5 * (vertices[lo].x + vertices[hi].x),
        0.5 * (vertices[lo].y + vertices[hi].y),
    )
}

pub const fn edge_endpoints(k: usize) -> [usize; 2] {
    EDGE_ENDPOINTS[k]
}

fn transpose2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

fn apply2(m: [[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// A H A^T for symmetric H = (hxx, hxy, hyy).
fn congruence(a: [[f64; 2]; 2], h: [f64; 3]) -> [f64; 3] {
    let [hxx, hxy, hyy] = h;
    [
        a[0][0] * a[0][0] * hxx + 2.0 * a[0][0] * a[0][1] * hxy + a[0][1] * a[0][1] * hyy,
        a[0][0] * a[1][0] * hxx + (a[0][0] * a[1][1] + a[0][1] * a[1][0]) * hxy + a[0][1] * a[1][1] * hyy,
        a[1][0] * a[1][0] * hxx + 2.0 * a[1][0] * a[1][1] * hxy + a[1][1] * a[1][1] * hyy,
    ]
}
