use thiserror::Error;

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("fixed-point iteration diverged at step {step}, iteration {iteration}")]
    Divergence { step: usize, iteration: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl FlowError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FlowError::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        FlowError::Numerical(msg.into())
    }
}
