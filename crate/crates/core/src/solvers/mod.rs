//! Shared numerical kernels: low-discrepancy sequences, the inverse normal
//! CDF, accelerated fixed-point iteration, Gauss-Newton and quasi-Newton
//! minimizers, and central finite differences.

mod diff;
mod fixed_point;
mod halton;
mod optimize;
mod rd;

pub use diff::{finite_difference_gradient, finite_difference_jacobian, jacobian_with_step};
pub use fixed_point::{accelerated_fixed_point, Acceleration, FixedPointConfig, FixedPointReport};
pub use halton::{halton_draws, normal_inverse_cdf, HALTON_PRIME_BASES};
pub use optimize::{gauss_newton, quasi_newton, Method, OptimizerReport};
pub use rd::rd_grid;

/// Sup-norm contraction tolerance for share inversions: eps^(5/6).
pub fn contraction_tolerance() -> f64 {
    f64::EPSILON.powf(5.0 / 6.0)
}

/// Gauss-Newton step-norm tolerance: eps^(1/2).
pub fn step_tolerance() -> f64 {
    f64::EPSILON.sqrt()
}

/// Gradient-norm threshold that triggers the quasi-Newton fallback: eps^(1/3).
pub fn gradient_fallback_threshold() -> f64 {
    f64::EPSILON.cbrt()
}
