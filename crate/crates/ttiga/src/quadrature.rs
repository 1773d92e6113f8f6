//! Gauss-Legendre quadrature per knot span and the weighted univariate
//! mass/stiffness factor matrices.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::splines::UnivariateSpline;

/// Quadrature rule on [0,1] assembled span by span. Weights sum to one.
#[derive(Debug, Clone)]
pub struct QuadratureRule<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

/// Gauss-Legendre nodes/weights on [-1,1], computed by Newton iteration on the
/// Legendre recurrence. Deterministic and accurate to machine precision for
/// the orders used here.
fn gauss_legendre_reference(m: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(m >= 1);
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..(m + 1) / 2 {
        // Initial guess (Abramowitz & Stegun 25.4.30 style).
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre P_m(x) and derivative via the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=m {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if m == 1 { x } else { p1 };
            let pm1 = if m == 1 { 1.0 } else { p0 };
            dp = m as f64 * (pm1 - x * p) / (1.0 - x * x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[m - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    (nodes, weights)
}

/// The m-point Gauss-Legendre rule mapped affinely onto every nonempty knot
/// span of `spline`, concatenated.
pub fn gauss_legendre_per_span<T: Scalar>(spline: &UnivariateSpline<T>, nodes_per_span: usize) -> Result<QuadratureRule<T>> {
    if nodes_per_span == 0 {
        return Err(Error::Invalid("quadrature needs at least one node per span".into()));
    }
    let (xs, ws) = gauss_legendre_reference(nodes_per_span);
    let half = T::from_f64_lossy(0.5);
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for (a, b) in spline.spans() {
        let mid = (a + b) * half;
        let scale = (b - a) * half;
        for q in 0..nodes_per_span {
            nodes.push(mid + scale * T::from_f64_lossy(xs[q]));
            weights.push(scale * T::from_f64_lossy(ws[q]));
        }
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Weighted univariate mass matrix: entry (i,j) = ∫ β_i β_j w dx̂, assembled
/// over the rule's nodes. Banded with bandwidth equal to the degree.
pub fn univariate_mass<T: Scalar>(
    trial: &UnivariateSpline<T>,
    test: &UnivariateSpline<T>,
    weight: impl Fn(T) -> T,
    rule: &QuadratureRule<T>,
) -> Result<Array2<T>> {
    if trial != test {
        return Err(Error::Invalid("Galerkin setting requires trial = test space".into()));
    }
    univariate_factor(trial, 0, 0, weight, rule)
}

/// Weighted univariate stiffness factor for dimension `d` of the (k,l) term:
/// the derivative hits the trial factor iff l = d and the test factor iff
/// k = d; otherwise the factor degenerates to a weighted mass matrix.
pub fn univariate_stiffness_factor<T: Scalar>(
    spline: &UnivariateSpline<T>,
    k: usize,
    l: usize,
    d: usize,
    weight: impl Fn(T) -> T,
    rule: &QuadratureRule<T>,
) -> Result<Array2<T>> {
    let trial_order = usize::from(l == d);
    let test_order = usize::from(k == d);
    univariate_factor(spline, trial_order, test_order, weight, rule)
}

fn univariate_factor<T: Scalar>(
    spline: &UnivariateSpline<T>,
    trial_order: usize,
    test_order: usize,
    weight: impl Fn(T) -> T,
    rule: &QuadratureRule<T>,
) -> Result<Array2<T>> {
    let n = spline.len();
    let mut out = Array2::zeros((n, n));
    for (&x, &w) in rule.nodes.iter().zip(rule.weights.iter()) {
        let scale = w * weight(x);
        if scale == T::zero() {
            continue;
        }
        let (start_i, row_vals) = spline.deriv_window(x, trial_order)?;
        let (start_j, col_vals) = if test_order == trial_order {
            (start_i, row_vals.clone())
        } else {
            spline.deriv_window(x, test_order)?
        };
        for (oi, &vi) in row_vals.iter().enumerate() {
            if vi == T::zero() {
                continue;
            }
            let c = scale * vi;
            for (oj, &vj) in col_vals.iter().enumerate() {
                out[[start_i + oi, start_j + oj]] += c * vj;
            }
        }
    }
    Ok(out)
}
