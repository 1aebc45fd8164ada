use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value iteration did not converge after {iterations} sweeps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// A checked inequality failed. For bound checks this means an implementation bug.
    #[error("violated: {0}")]
    Violation(String),

    /// The witness inputs are not an optimal pair.
    #[error("inconsistent witness: {0}")]
    Witness(String),

    /// A model or loss produced NaN/Inf.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error("episode protocol error: {0}")]
    Protocol(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
