//! Demand estimation for nested and mixed logit models with recentered
//! cost-shock instruments.
//!
//! The crate is organized bottom-up:
//! - [`solvers`]: quasi-random sequences, accelerated fixed points, and the
//!   Gauss-Newton / quasi-Newton optimizers every estimator shares.
//! - [`mixedlogit`]: market shares, the share inversion, and the analytic
//!   derivative blocks of both.
//! - [`nestedlogit`]: closed-form nested logit shares, inversion, and the
//!   within-nest shock instruments.
//! - [`dgp`]: the simulated panel (characteristics, shocks, equilibrium
//!   prices) used by the Monte Carlo study.
//! - [`instruments`]: characteristic-based and recentered (shift-share and
//!   forward-simulated) instrument construction.
//! - [`estimators`]: GMM estimators over the simulated panels and their
//!   standard errors.
//! - [`harness`]: Monte Carlo experiment driver and tabulation.

pub mod dgp;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod instruments;
pub mod mixedlogit;
pub mod nestedlogit;
pub mod solvers;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
