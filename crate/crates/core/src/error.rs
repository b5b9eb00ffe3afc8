use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    /// The update rule has no value at this point (zero gradient for Normalized
    /// GD, zero loss for GD on `sqrt(L)`, zero tilde vector).
    #[error("update rule undefined: {0}")]
    UndefinedUpdate(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{what} did not converge (residual {residual:e})")]
    NotConverged { what: &'static str, residual: f64 },

    #[error("degenerate manifold: {0}")]
    DegenerateManifold(String),

    #[error("loss model does not provide {0}")]
    Unsupported(&'static str),
}
