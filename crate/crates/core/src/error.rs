//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition (wrong sign, out of range,
    /// empty where nonempty is required).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Dimension mismatch between related arrays.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An iterative routine exhausted its iteration budget or stalled.
    #[error("failed to converge: {0}")]
    NonConvergence(String),

    /// An iterate or function value became non-finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A fixed-point iteration produced a non-finite iterate; carries the
    /// last finite iterate for diagnosis.
    #[error("diverged after {evaluations} map evaluations")]
    Diverged { evaluations: usize, last_finite: Vec<f64> },

    /// A matrix that must be invertible was singular or numerically rank
    /// deficient.
    #[error("rank deficient: {0}")]
    RankDeficient(String),

    /// A matrix inversion succeeded but is too ill-conditioned to trust.
    #[error("ill-conditioned: {0} (condition estimate {1:.3e})")]
    IllConditioned(String, f64),

    /// A market had to be dropped (equilibrium price solver failed both the
    /// fixed-point and the damped-Newton route).
    #[error("market dropped: {0}")]
    MarketDropped(String),

    /// Data required by an operation is missing (e.g. no lagged period).
    #[error("missing data: {0}")]
    MissingData(String),

    /// File or serialization failure.
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
