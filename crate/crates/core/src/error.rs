use thiserror::Error;

/// Errors produced by the federated optimization routines.
#[derive(Debug, Error)]
pub enum FedError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("convexity bounds are undefined for the nonconvex regularizer")]
    NonconvexBounds,

    /// `round` matches the record index `k` of the round that failed.
    #[error("non-finite iterate at round {round}, agent {agent}")]
    NonFinite { round: usize, agent: usize },

    #[error("inner solver did not reach tolerance {tolerance:e} within {iterations} iterations")]
    NoConvergence { tolerance: f64, iterations: usize },

    #[error("no grid point yields a stable contraction matrix")]
    NoStablePoint,

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FedError>;

pub(crate) fn invalid(msg: impl Into<String>) -> FedError {
    FedError::InvalidParameter(msg.into())
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(FedError::DimensionMismatch { expected, found })
    }
}
