//! Generalized-golden-ratio low-discrepancy grid used to pick starting
//! points for the GMM searches.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Unique positive root of x^(d+1) = x + 1, by Newton iteration.
fn generalized_golden_ratio(dims: usize) -> f64 {
    let p = dims as i32 + 1;
    let mut x = 2.0f64;
    for _ in 0..200 {
        let f = x.powi(p) - x - 1.0;
        let fp = p as f64 * x.powi(p - 1) - 1.0;
        let next = x - f / fp;
        if (next - x).abs() <= f64::EPSILON * x.abs() {
            return next;
        }
        x = next;
    }
    x
}

/// Deterministic, seedless low-discrepancy points in the box [lower, upper]:
/// per coordinate k the recurrence x_{n+1} = frac(x_n + phi_d^{-k}) from
/// x_0 = 1/2, mapped affinely into the box. One row per point.
pub fn rd_grid(
    n_points: usize,
    dims: usize,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if n_points == 0 || dims == 0 {
        return Err(Error::InvalidInput("rd_grid needs n_points >= 1 and dims >= 1".into()));
    }
    if lower.len() != dims || upper.len() != dims {
        return Err(Error::Dimension(format!(
            "rd_grid bounds must have length {dims}, got {} and {}",
            lower.len(),
            upper.len()
        )));
    }
    for k in 0..dims {
        if !(lower[k] < upper[k]) {
            return Err(Error::InvalidInput(format!(
                "degenerate box in coordinate {k}: [{}, {}]",
                lower[k], upper[k]
            )));
        }
    }
    let phi = generalized_golden_ratio(dims);
    let alphas: Vec<f64> = (1..=dims).map(|k| phi.powi(-(k as i32))).collect();
    let mut out = DMatrix::zeros(n_points, dims);
    for (k, &alpha) in alphas.iter().enumerate() {
        let mut x = 0.5f64;
        for i in 0..n_points {
            x = (x + alpha).fract();
            out[(i, k)] = lower[k] + x * (upper[k] - lower[k]);
        }
    }
    Ok(out)
}
