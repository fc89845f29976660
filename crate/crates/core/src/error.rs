use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("assignment is incomplete: sample {0} is undecided")]
    IncompleteAssignment(usize),

    #[error("threat model has no finite action space: {0}")]
    UnsupportedNeighborhood(String),

    #[error("non-finite bound for {0}")]
    NonFiniteBound(String),

    #[error("missing bound for {0}")]
    MissingBound(String),

    #[error("objective does not match the available state: {0}")]
    ObjectiveMismatch(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid model file, line {line}: {message}")]
    ModelSyntax { line: usize, message: String },

    #[error("witness is missing a value for variable {0}")]
    MissingWitnessValue(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Errors the CLI reports with the "bad configuration" exit code.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Validation(_)
                | Error::Parse { .. }
                | Error::DimensionMismatch { .. }
                | Error::Unsupported(_)
                | Error::UnsupportedNeighborhood(_)
                | Error::NonFiniteBound(_)
                | Error::ObjectiveMismatch(_)
        )
    }
}
