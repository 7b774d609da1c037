//! Central finite differences with the cube-root-of-epsilon step rule.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

fn step_size(xi: f64) -> f64 {
    f64::EPSILON.cbrt() * xi.abs().max(1.0)
}

/// Central-difference jacobian with an explicit per-coordinate step. The
/// truncation error is O(h^2); exposed so tests can verify the order.
pub fn jacobian_with_step<F>(f: &mut F, x: &DVector<f64>, steps: &[f64]) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    if steps.len() != x.len() {
        return Err(Error::Dimension("one step per coordinate required".into()));
    }
    let mut jac: Option<DMatrix<f64>> = None;
    for i in 0..x.len() {
        let h = steps[i];
        let mut hi = x.clone();
        hi[i] += h;
        let mut lo = x.clone();
        lo[i] -= h;
        let f_hi = f(&hi)?;
        let f_lo = f(&lo)?;
        if !f_hi.iter().all(|v| v.is_finite()) || !f_lo.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "finite differences: non-finite evaluation perturbing coordinate {i}"
            )));
        }
        let col = (f_hi - f_lo) / (2.0 * h);
        let jac = jac.get_or_insert_with(|| DMatrix::zeros(col.len(), x.len()));
        if jac.nrows() != col.len() {
            return Err(Error::Dimension("finite differences: output length changed".into()));
        }
        jac.set_column(i, &col);
    }
    jac.ok_or_else(|| Error::InvalidInput("finite differences need at least one coordinate".into()))
}

/// Central-difference jacobian of a vector function, step
/// h_i = cbrt(machine epsilon) * max(1, |x_i|).
pub fn finite_difference_jacobian<F>(f: &mut F, x: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let steps: Vec<f64> = x.iter().map(|&xi| step_size(xi)).collect();
    jacobian_with_step(f, x, &steps)
}

/// Central-difference gradient of a scalar function, same step rule.
pub fn finite_difference_gradient<F>(f: &mut F, x: &DVector<f64>) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let mut grad = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = step_size(x[i]);
        let mut hi = x.clone();
        hi[i] += h;
        let mut lo = x.clone();
        lo[i] -= h;
        let f_hi = f(&hi)?;
        let f_lo = f(&lo)?;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite differences: non-finite evaluation perturbing coordinate {i}"
            )));
        }
        grad[i] = (f_hi - f_lo) / (2.0 * h);
    }
    Ok(grad)
}
