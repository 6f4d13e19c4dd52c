//! Gaussian quadrature on the reference triangle {(x, y): x, y >= 0, x + y <= 1}.
//!
//! Rules are conical products of Gauss-Legendre and Gauss-Jacobi(1, 0) lines
//! collapsed onto the triangle. For a requested exactness degree `d` the rule
//! uses n = ceil((d + 1) / 2) points per direction and integrates every
//! polynomial of total degree <= 2n - 1 exactly. Node/weight data is generated
//! by Golub-Welsch on the classical three-term recurrences and verified once,
//! on first use, against the closed-form monomial integrals
//! `int x^a y^b = a! b! / (a + b + 2)!`.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 20;

/// Default exactness degree used by assembly. The trilinear form pairs a
/// cubic Laplacian with two quartic gradients (degree 11); the remaining
/// headroom over-integrates the non-polynomial forcing term.
pub const DEFAULT_ASSEMBLY_DEGREE: usize = 14;

#[derive(Debug, Clone)]
pub struct QuadratureRule {
    /// Reference coordinates (x, y) inside the closed reference triangle.
    pub points: Vec<[f64; 2]>,
    /// Weights summing to the reference-triangle area 1/2.
    pub weights: Vec<f64>,
    /// Highest total polynomial degree integrated exactly.
    pub degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies the rule to `f` on the reference triangle.
    pub fn integrate(&self, mut f: impl FnMut(f64, f64) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * f(p[0], p[1]))
            .sum()
    }
}

/// Returns a rule exact for all polynomials of total degree >= `d`.
pub fn rule_for_degree(d: usize) -> Result<QuadratureRule> {
    if d < 1 || d > MAX_DEGREE {
        return Err(Error::UnsupportedDegree(d));
    }
    run_self_test_once();
    Ok(cached_rule(d))
}

fn cached_rule(d: usize) -> QuadratureRule {
    static CACHE: OnceLock<Mutex<HashMap<usize, QuadratureRule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut cache = cache.lock().unwrap();
    cache.entry(d).or_insert_with(|| build_rule(d)).clone()
}

fn build_rule(d: usize) -> QuadratureRule {
    let n = (d + 2) / 2; // ceil((d + 1) / 2)
    let (xu, wu) = gauss_legendre_01(n);
    let (xv, wv) = gauss_jacobi_1_0_01(n);
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for (v, wv) in xv.iter().zip(&wv) {
        for (u, wu) in xu.iter().zip(&wu) {
            // x = u (1 - v), y = v; dx dy = (1 - v) du dv, with the (1 - v)
            // factor carried by the Jacobi weight.
            points.push([u * (1.0 - v), *v]);
            weights.push(wu * wv);
        }
    }
    QuadratureRule {
        points,
        weights,
        degree: 2 * n - 1,
    }
}

/// Golub-Welsch nodes/weights for a symmetric tridiagonal Jacobi matrix with
/// diagonal `alpha`, off-diagonal `sqrt(beta[1..])`, and zeroth moment `mu0`.
fn golub_welsch(alpha: &[f64], beta: &[f64], mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = alpha.len();
    let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = alpha[i];
        if i + 1 < n {
            let b = beta[i + 1].sqrt();
            m[(i, i + 1)] = b;
            m[(i + 1, i)] = b;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Gauss-Legendre nodes/weights on [0, 1].
fn gauss_legendre_01(n: usize) -> (Vec<f64>, Vec<f64>) {
    let alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    for k in 1..n {
        let kf = k as f64;
        beta[k] = kf * kf / (4.0 * kf * kf - 1.0);
    }
    let (x, w) = golub_welsch(&alpha, &beta, 2.0);
    (
        x.iter().map(|x| 0.5 * (x + 1.0)).collect(),
        w.iter().map(|w| 0.5 * w).collect(),
    )
}

/// Gauss-Jacobi nodes/weights for the weight (1 - v) on [0, 1].
fn gauss_jacobi_1_0_01(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Recurrence for the Jacobi weight (1 - x)^1 (1 + x)^0 on [-1, 1].
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    alpha[0] = -1.0 / 3.0;
    for k in 1..n {
        let kf = k as f64;
        alpha[k] = -1.0 / ((2.0 * kf + 1.0) * (2.0 * kf + 3.0));
        beta[k] = if k == 1 {
            2.0 / 9.0
        } else {
            kf * (kf + 1.0) / ((2.0 * kf + 1.0) * (2.0 * kf + 1.0))
        };
    }
    let (x, w) = golub_welsch(&alpha, &beta, 2.0);
    (
        x.iter().map(|x| 0.5 * (x + 1.0)).collect(),
        // (1 - x) = 2 (1 - v) and dx = 2 dv contribute the factor 1/4.
        w.iter().map(|w| 0.25 * w).collect(),
    )
}

/// Exact reference-triangle integral of x^a y^b.
pub fn monomial_integral(a: u32, b: u32) -> f64 {
    // a! b! / (a + b + 2)! computed as a running product to avoid overflow.
    let mut value = 1.0;
    for k in 1..=(a + b + 2) {
        value /= k as f64;
        if k <= a {
            value *= k as f64;
        }
        if k <= b {
            value *= k as f64;
        }
    }
    value
}

fn run_self_test_once() {
    static DONE: OnceLock<()> = OnceLock::new();
    DONE.get_or_init(|| {
        for d in 1..=MAX_DEGREE {
            let rule = cached_rule(d);
            assert_monomial_exactness(&rule, d);
        }
    });
}

fn assert_monomial_exactness(rule: &QuadratureRule, degree: usize) {
    for a in 0..=degree as u32 {
        for b in 0..=(degree as u32 - a) {
            let num = rule.integrate(|x, y| x.powi(a as i32) * y.powi(b as i32));
            let exact = monomial_integral(a, b);
            let rel = (num - exact).abs() / exact;
            assert!(
                rel <= 1e-13,
                "quadrature self-test failed: degree {degree}, x^{a} y^{b}: rel err {rel:.3e}"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_reference_area() {
        for d in 1..=MAX_DEGREE {
            let rule = rule_for_degree(d).unwrap();
            let sum: f64 = rule.weights.iter().sum();
            assert!((sum - 0.5).abs() <= 1e-14, "degree {d}: sum {sum}");
        }
    }

    #[test]
    fn points_inside_closed_reference_triangle() {
        for d in 1..=MAX_DEGREE {
            let rule = rule_for_degree(d).unwrap();
            for p in &rule.points {
                assert!(p[0] >= -1e-15 && p[1] >= -1e-15 && p[0] + p[1] <= 1.0 + 1e-15);
            }
            assert!(rule.weights.iter().all(|w| w.is_finite() && *w > 0.0));
        }
    }

    #[test]
    fn monomials_exact_through_declared_degree() {
        for d in 1..=MAX_DEGREE {
            let rule = rule_for_degree(d).unwrap();
            assert!(rule.degree >= d);
            assert_monomial_exactness(&rule, rule.degree);
        }
    }

    #[test]
    fn constant_integrates_to_half() {
        let rule = rule_for_degree(1).unwrap();
        assert_eq!(rule.integrate(|_, _| 1.0), rule.weights.iter().sum::<f64>());
        assert!((rule.integrate(|_, _| 1.0) - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn degree_11_rule_is_inexact_beyond_declared_degree() {
        // x^6 y^6 has total degree 12; the degree-11 rule need not capture it.
        let rule = rule_for_degree(11).unwrap();
        assert_eq!(rule.degree, 11);
        let num = rule.integrate(|x, y| x.powi(6) * y.powi(6));
        let exact = monomial_integral(6, 6);
        let rel = (num - exact).abs() / exact;
        assert!(rel > 1e-13, "expected visible error, got {rel:.3e}");
    }

    #[test]
    fn out_of_range_degrees_rejected() {
        assert!(matches!(rule_for_degree(0), Err(Error::UnsupportedDegree(0))));
        assert!(matches!(
            rule_for_degree(21),
            Err(Error::UnsupportedDegree(21))
        ));
    }

    #[test]
    fn affine_mapped_quadratic_matches_analytic_value() {
        // Triangle (0,0), (2,0), (0,3): int x^2 dx dy = int_0^2 x^2 (3 - 3x/2) dx = 2.
        let rule = rule_for_degree(4).unwrap();
        let (x0, y0) = (0.0, 0.0);
        let j = [[2.0, 0.0], [0.0, 3.0]];
        let det: f64 = 6.0;
        let num: f64 = rule
            .points
            .iter()
            .zip(&rule.weights)
            .map(|(p, w)| {
                let x = x0 + j[0][0] * p[0] + j[0][1] * p[1];
                let _y = y0 + j[1][0] * p[0] + j[1][1] * p[1];
                w * det * x * x
            })
            .sum();
        assert!((num - 2.0).abs() <= 1e-13, "got {num}");
    }
}
