use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient at optimizer step {step}; update rejected")]
    NonFiniteGradient { step: u64 },

    #[error("integration produced a non-finite state at step {step} (s = {s})")]
    Diverged { step: usize, s: f64 },

    #[error("moment cache miss for sample {0}")]
    CacheMiss(u64),

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("solver {method} cannot spend exactly {nfe} evaluations")]
    IncompatibleSolver { method: String, nfe: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: &str, expected: usize, got: usize) -> Error {
    Error::Shape(format!("{what}: expected {expected}, got {got}"))
}
