use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("set of {size} sites exceeds the solver cap of {cap}")]
    TooLarge { size: usize, cap: usize },

    #[error("point {0} lies outside the domain")]
    OutsideDomain(String),

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("numerical quality check failed: {0}")]
    Numerical(String),

    #[error("Monte Carlo budget exhausted: {0}")]
    Budget(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LabError::InvalidArgument(msg.into())
    }
}
