//! Manufactured solutions, forcing synthesis, error norms, observed
//! convergence orders, and the convergence-record table format.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{element_maps, FieldEval, FlowParams, Solution};
use crate::error::{Error, Result};
use crate::mesh::{Point2, Rect};
use crate::quadrature::QuadratureRule;

/// One separable factor: value and derivatives through order 4.
type Factor = Arc<dyn Fn(f64) -> [f64; 5] + Send + Sync>;

/// A closed-form exact solution psi(x, y) = X(x) Y(y) with all partial
/// derivatives through total order 4, clamped on the boundary of `domain`.
#[derive(Clone)]
pub struct ManufacturedSolution {
    pub id: &'static str,
    pub domain: Rect,
    /// Parameters the solution is quoted with in the experiments.
    pub default_params: FlowParams,
    factor_x: Factor,
    factor_y: Factor,
}

/// sin^2(a t) and derivatives through order 4.
fn sin2_factor(a: f64) -> Factor {
    Arc::new(move |t: f64| {
        let (s, c) = (2.0 * a * t).sin_cos();
        let b = 2.0 * a;
        [
            0.5 * (1.0 - c),
            0.5 * b * s,
            0.5 * b * b * c,
            -0.5 * b * b * b * s,
            -0.5 * b * b * b * b * c,
        ]
    })
}

/// [(1 - t/3)(1 - e^{-20 t})]^2 and derivatives through order 4.
fn boundary_layer_factor() -> Factor {
    Arc::new(|t: f64| {
        let e = (-20.0 * t).exp();
        let u = 1.0 - t / 3.0;
        let du = -1.0 / 3.0;
        // v = 1 - e^{-20t}; v^(k) = -(-20)^k e^{-20t} for k >= 1.
        let v = [1.0 - e, 20.0 * e, -400.0 * e, 8000.0 * e, -160000.0 * e];
        let g = [
            u * v[0],
            du * v[0] + u * v[1],
            2.0 * du * v[1] + u * v[2],
            3.0 * du * v[2] + u * v[3],
            4.0 * du * v[3] + u * v[4],
        ];
        [
            g[0] * g[0],
            2.0 * g[0] * g[1],
            2.0 * (g[1] * g[1] + g[0] * g[2]),
            2.0 * (3.0 * g[1] * g[2] + g[0] * g[3]),
            2.0 * (3.0 * g[2] * g[2] + 4.0 * g[1] * g[3] + g[0] * g[4]),
        ]
    })
}

impl ManufacturedSolution {
    /// psi = (sin 4 pi x sin 4 pi y)^2 on the unit square, Re = Ro = 1.
    pub fn sine_squared() -> Self {
        let a = 4.0 * std::f64::consts::PI;
        Self {
            id: "sine-squared",
            domain: Rect::unit_square(),
            default_params: FlowParams::new(1.0, 1.0).unwrap(),
            factor_x: sin2_factor(a),
            factor_y: sin2_factor(a),
        }
    }

    /// psi = [(1 - x/3)(1 - e^{-20x}) sin pi y]^2 on [0,3] x [0,1],
    /// Re = 5, Ro = 1e-4; sharp layer near x = 0.
    pub fn boundary_layer() -> Self {
        Self {
            id: "boundary-layer",
            domain: Rect::new(0.0, 0.0, 3.0, 1.0),
            default_params: FlowParams::new(5.0, 1e-4).unwrap(),
            factor_x: boundary_layer_factor(),
            factor_y: sin2_factor(std::f64::consts::PI),
        }
    }

    pub fn by_id(id: &str) -> Result<Self> {
        match id {
            "sine-squared" => Ok(Self::sine_squared()),
            "boundary-layer" => Ok(Self::boundary_layer()),
            other => Err(Error::InvalidArgument(format!(
                "unknown problem '{other}' (expected sine-squared or boundary-layer)"
            ))),
        }
    }

    /// Build a custom separable solution (used by tests).
    pub fn separable(
        id: &'static str,
        domain: Rect,
        default_params: FlowParams,
        factor_x: Factor,
        factor_y: Factor,
    ) -> Self {
        Self { id, domain, default_params, factor_x, factor_y }
    }

    /// d^(i+j) psi / dx^i dy^j for i + j <= 4.
    pub fn deriv(&self, p: Point2, i: usize, j: usize) -> f64 {
        debug_assert!(i + j <= 4);
        (self.factor_x)(p.x)[i] * (self.factor_y)(p.y)[j]
    }

    /// [value, dx, dy, dxx, dxy, dyy], the Argyris interpolation data.
    pub fn eval6(&self, p: Point2) -> [f64; 6] {
        let x = (self.factor_x)(p.x);
        let y = (self.factor_y)(p.y);
        [
            x[0] * y[0],
            x[1] * y[0],
            x[0] * y[1],
            x[2] * y[0],
            x[1] * y[1],
            x[0] * y[2],
        ]
    }

    pub fn laplacian(&self, p: Point2) -> f64 {
        self.deriv(p, 2, 0) + self.deriv(p, 0, 2)
    }

    pub fn biharmonic(&self, p: Point2) -> f64 {
        self.deriv(p, 4, 0) + 2.0 * self.deriv(p, 2, 2) + self.deriv(p, 0, 4)
    }

    /// J(psi, lap psi) = psi_x (lap psi)_y - psi_y (lap psi)_x.
    pub fn jacobian_term(&self, p: Point2) -> f64 {
        let lap_x = self.deriv(p, 3, 0) + self.deriv(p, 1, 2);
        let lap_y = self.deriv(p, 2, 1) + self.deriv(p, 0, 3);
        self.deriv(p, 1, 0) * lap_y - self.deriv(p, 0, 1) * lap_x
    }

    /// The forcing F with Ro^{-1} F equal to the strong-form left side:
    /// F = Ro Re^{-1} lap^2 psi + Ro J(psi, lap psi) - psi_x.
    pub fn forcing(&self, params: FlowParams, p: Point2) -> f64 {
        params.rossby * (self.biharmonic(p) / params.reynolds + self.jacobian_term(p))
            - self.deriv(p, 1, 0)
    }

    /// Samples `n` points per side and checks psi = dpsi/dn = 0 within
    /// 1e-12 of the solution's interior scale.
    pub fn check_boundary_compatibility(&self, n: usize) -> Result<()> {
        let d = self.domain;
        let scale = (0..40)
            .flat_map(|i| (0..40).map(move |j| (i, j)))
            .map(|(i, j)| {
                let p = Point2::new(
                    d.x0 + d.width() * (i as f64 + 0.5) / 40.0,
                    d.y0 + d.height() * (j as f64 + 0.5) / 40.0,
                );
                self.eval6(p)[0].abs()
            })
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);
        for k in 0..n {
            let s = k as f64 / (n - 1) as f64;
            let checks = [
                (Point2::new(d.x0 + s * d.width(), d.y0), 2), // bottom: n = -y
                (Point2::new(d.x0 + s * d.width(), d.y1), 2), // top
                (Point2::new(d.x0, d.y0 + s * d.height()), 1), // left: n = -x
                (Point2::new(d.x1, d.y0 + s * d.height()), 1), // right
            ];
            for (p, normal_component) in checks {
                let e = self.eval6(p);
                if e[0].abs() > 1e-12 * scale || e[normal_component].abs() > 1e-12 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "{}: boundary compatibility violated at ({}, {})",
                        self.id, p.x, p.y
                    )));
                }
            }
        }
        Ok(())
    }
}

/// L2 norm plus H1 and H2 seminorms of the error. The H2 seminorm is the
/// full Hessian Frobenius seminorm (int psi_xx^2 + 2 psi_xy^2 + psi_yy^2)^(1/2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorNorms {
    pub l2: f64,
    pub h1: f64,
    pub h2: f64,
}

pub fn error_norms(
    numeric: &Solution,
    exact: &ManufacturedSolution,
    quad: &QuadratureRule,
) -> ErrorNorms {
    let field = FieldEval::new(numeric);
    let maps = element_maps(&numeric.dofmap);
    let per_tri: Vec<[f64; 3]> = (0..numeric.mesh.n_triangles())
        .into_par_iter()
        .map(|t| {
            let map = &maps[t];
            let mut acc = [0.0f64; 3];
            for (rp, rw) in quad.points.iter().zip(&quad.weights) {
                let p = map.to_physical(rp[0], rp[1]);
                let num = field.eval_in(t, p);
                let ex = exact.eval6(p);
                let w = rw * map.det;
                let dv = num[0] - ex[0];
                let (dgx, dgy) = (num[1] - ex[1], num[2] - ex[2]);
                let (dxx, dxy, dyy) = (num[3] - ex[3], num[4] - ex[4], num[5] - ex[5]);
                acc[0] += w * dv * dv;
                acc[1] += w * (dgx * dgx + dgy * dgy);
                acc[2] += w * (dxx * dxx + 2.0 * dxy * dxy + dyy * dyy);
            }
            acc
        })
        .collect();
    // Serial reduction in element order keeps results deterministic.
    let mut total = [0.0f64; 3];
    for a in per_tri {
        for k in 0..3 {
            total[k] += a[k];
        }
    }
    ErrorNorms {
        l2: total[0].sqrt(),
        h1: total[1].sqrt(),
        h2: total[2].sqrt(),
    }
}

/// log(e_prev / e_curr) / log(h_prev / h_curr); `None` when undefined.
pub fn observed_order(e_prev: f64, e_curr: f64, h_prev: f64, h_curr: f64) -> Option<f64> {
    if e_prev <= 0.0 || e_curr <= 0.0 || h_prev <= h_curr || h_curr <= 0.0 {
        return None;
    }
    Some((e_prev / e_curr).ln() / (h_prev / h_curr).ln())
}

/// One table row of a convergence or efficiency study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    /// Coarse mesh size (absent for one-level rows).
    #[serde(rename = "H")]
    pub h_coarse: Option<f64>,
    pub h: f64,
    #[serde(rename = "dofs_H")]
    pub dofs_coarse: Option<usize>,
    #[serde(rename = "dofs_h")]
    pub dofs_fine: usize,
    #[serde(rename = "e_L2")]
    pub e_l2: f64,
    #[serde(rename = "order_L2")]
    pub order_l2: Option<f64>,
    #[serde(rename = "e_H1")]
    pub e_h1: f64,
    #[serde(rename = "order_H1")]
    pub order_h1: Option<f64>,
    #[serde(rename = "e_H2")]
    pub e_h2: f64,
    #[serde(rename = "order_H2")]
    pub order_h2: Option<f64>,
    pub time_s: f64,
    #[serde(default)]
    pub converged: bool,
}

pub const CSV_HEADER: &str = "H,h,dofs_H,dofs_h,e_L2,order_L2,e_H1,order_H1,e_H2,order_H2,time_s";

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.17e}"))
}

/// Serializes records in the pinned column order, 17 significant digits.
pub fn records_to_csv(records: &[ConvergenceRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{:.17e},{},{},{:.17e},{},{:.17e},{},{:.17e},{},{:.17e}",
            fmt_opt_f64(r.h_coarse),
            r.h,
            r.dofs_coarse.map_or(String::new(), |d| d.to_string()),
            r.dofs_fine,
            r.e_l2,
            fmt_opt_f64(r.order_l2),
            r.e_h1,
            fmt_opt_f64(r.order_h1),
            r.e_h2,
            fmt_opt_f64(r.order_h2),
            r.time_s,
        );
    }
    out
}

/// Parses CSV produced by [`records_to_csv`] (round-trip contract).
pub fn records_from_csv(text: &str) -> Result<Vec<ConvergenceRecord>> {
    let bad = |line: &str, why: &str| {
        Error::InvalidArgument(format!("malformed record line '{line}': {why}"))
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "unexpected CSV header: {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(bad(line, "expected 11 columns"));
        }
        let opt_f64 = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(line, "bad float"))
            }
        };
        let req_f64 = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| bad(line, "bad float"))
        };
        records.push(ConvergenceRecord {
            h_coarse: opt_f64(f[0])?,
            h: req_f64(f[1])?,
            dofs_coarse: if f[2].is_empty() {
                None
            } else {
                Some(f[2].parse().map_err(|_| bad(line, "bad integer"))?)
            },
            dofs_fine: f[3].parse().map_err(|_| bad(line, "bad integer"))?,
            e_l2: req_f64(f[4])?,
            order_l2: opt_f64(f[5])?,
            e_h1: req_f64(f[6])?,
            order_h1: opt_f64(f[7])?,
            e_h2: req_f64(f[8])?,
            order_h2: opt_f64(f[9])?,
            time_s: req_f64(f[10])?,
            converged: true,
        });
    }
    Ok(records)
}
