use std::path::PathBuf;

use flowinv_core::FlowError;
use thiserror::Error;

/// Failures of a command, each mapped to a documented exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("assertion failed: {invariant}: {detail}")]
    Assertion { invariant: String, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const MISSING_INPUT: i32 = 2;
    pub const ASSERTION: i32 = 3;
    pub const NUMERICAL: i32 = 4;

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => Self::USAGE,
            CliError::MissingInput(_) => Self::MISSING_INPUT,
            CliError::Assertion { .. } => Self::ASSERTION,
            CliError::Numerical(_) => Self::NUMERICAL,
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Numerical(msg) => CliError::Numerical(msg),
            FlowError::Divergence { .. } | FlowError::Singular(_) => CliError::Numerical(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("json error: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Usage(format!("csv error: {e}"))
    }
}
