//! Gauss-Newton minimizer for GMM objectives and the quasi-Newton fallback.

use crate::error::{Error, Result};
use crate::solvers::diff::finite_difference_gradient;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    GaussNewton,
    QuasiNewtonFallback,
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_step_norm: f64,
    pub final_gradient_norm: f64,
    pub objective: f64,
    pub method_used: Method,
}

/// Gauss-Newton on the GMM objective (1/2) h'Wh: repeatedly solves
/// (H'WH) b = -H'Wh and steps theta += b until the step norm falls to
/// `step_tol` or `max_iter` steps were taken.
pub fn gauss_newton<Fh, Fj>(
    mut moments: Fh,
    mut jacobian: Fj,
    weight: &DMatrix<f64>,
    start: &DVector<f64>,
    step_tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, OptimizerReport)>
where
    Fh: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    Fj: FnMut(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    let mut theta = start.clone();
    let mut iterations = 0usize;
    let mut step_norm;
    let mut converged = false;
    loop {
        let h = moments(&theta)?;
        let jac = jacobian(&theta)?;
        if jac.nrows() != h.len() || jac.ncols() != theta.len() {
            return Err(Error::Dimension(format!(
                "gauss_newton jacobian is {}x{}, expected {}x{}",
                jac.nrows(),
                jac.ncols(),
                h.len(),
                theta.len()
            )));
        }
        let wh = weight * &h;
        let hw = jac.transpose() * weight;
        let normal = &hw * &jac;
        let rhs = -(jac.transpose() * &wh);
        let step = normal.clone().lu().solve(&rhs).ok_or_else(|| {
            Error::RankDeficient("gauss_newton normal equations singular".into())
        })?;
        if !step.iter().all(|x| x.is_finite()) {
            return Err(Error::RankDeficient(
                "gauss_newton step non-finite (jacobian numerically rank deficient)".into(),
            ));
        }
        theta += &step;
        iterations += 1;
        step_norm = step.norm();
        if step_norm <= step_tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
    }
    let h = moments(&theta)?;
    let jac = jacobian(&theta)?;
    let grad = jac.transpose() * (weight * &h);
    let objective = 0.5 * h.dot(&(weight * &h));
    Ok((
        theta,
        OptimizerReport {
            converged,
            iterations,
            final_step_norm: step_norm,
            final_gradient_norm: grad.norm(),
            objective,
            method_used: Method::GaussNewton,
        },
    ))
}

/// BFGS with central finite-difference gradients and a backtracking line
/// search with quadratic interpolation. Unconstrained; callers impose bounds
/// through smooth reparameterizations.
pub fn quasi_newton<F>(
    mut objective: F,
    start: &DVector<f64>,
    grad_tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, OptimizerReport)>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let n = start.len();
    let mut theta = start.clone();
    let mut f = objective(&theta)?;
    if !f.is_finite() {
        return Err(Error::NonFinite("quasi_newton objective at start".into()));
    }
    let mut grad = finite_difference_gradient(&mut objective, &theta)?;
    let mut inv_hessian = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0usize;
    let mut step_norm = 0.0f64;
    let mut converged = grad.norm() <= grad_tol;
    let c1 = 1e-4;

    while !converged && iterations < max_iter {
        let mut direction = -(&inv_hessian * &grad);
        let mut slope = grad.dot(&direction);
        if !(slope < 0.0) {
            // Curvature information went stale; restart from steepest descent.
            inv_hessian = DMatrix::identity(n, n);
            direction = -grad.clone();
            slope = grad.dot(&direction);
            if !(slope < 0.0) {
                break;
            }
        }
        // Backtracking line search with quadratic interpolation on failure.
        let mut alpha = 1.0f64;
        let mut accepted = None;
        for _ in 0..60 {
            let candidate = &theta + &direction * alpha;
            let fc = objective(&candidate)?;
            if fc.is_finite() && fc <= f + c1 * alpha * slope {
                accepted = Some((candidate, fc));
                break;
            }
            let quad = if fc.is_finite() {
                -slope * alpha * alpha / (2.0 * (fc - f - slope * alpha))
            } else {
                alpha / 2.0
            };
            alpha = quad.clamp(0.1 * alpha, 0.5 * alpha);
            if alpha * direction.norm() <= 1e-16 * (1.0 + theta.norm()) {
                break;
            }
        }
        let Some((next, f_next)) = accepted else {
            break; // line-search failure: report unconverged below
        };
        let grad_next = finite_difference_gradient(&mut objective, &next)?;
        let s = &next - &theta;
        let y = &grad_next - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            // BFGS inverse update.
            let rho = 1.0 / sy;
            let hy = &inv_hessian * &y;
            let yhy = y.dot(&hy);
            let ss = &s * s.transpose();
            let hys = &hy * s.transpose();
            inv_hessian = &inv_hessian + ss * (rho * rho * yhy + rho) - (&hys + hys.transpose()) * rho;
        }
        step_norm = s.norm();
        theta = next;
        f = f_next;
        grad = grad_next;
        iterations += 1;
        converged = grad.norm() <= grad_tol;
    }

    Ok((
        theta.clone(),
        OptimizerReport {
            converged,
            iterations,
            final_step_norm: step_norm,
            final_gradient_norm: grad.norm(),
            objective: f,
            method_used: Method::QuasiNewtonFallback,
        },
    ))
}
