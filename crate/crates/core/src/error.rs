use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid chain spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("coincident consecutive joints {0} and {1}")]
    DegenerateDirection(usize, usize),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid distance bound: D_min {min} > D_max {max}")]
    InvalidBound { min: f64, max: f64 },
    #[error("multiplier set too large: {count} products")]
    Capacity { count: usize },
    #[error("unknown solver {0:?}; expected sos or local")]
    UnknownSolver(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Sdp(#[from] sosik_sdp::SdpError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
