use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the search / train / lower / estimate pipeline.
#[derive(Debug, Error)]
pub enum NashError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("numeric abort: {0}")]
    NumericAbort(String),

    #[error("unsupported op `{node}`: {reason}")]
    UnsupportedOp { node: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl NashError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        NashError::InvalidArgument(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        NashError::InvalidState(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NashError::Io { path: path.into(), source }
    }

    /// Process exit code used by the `nash` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            NashError::Config(_) | NashError::Json(_) => 2,
            NashError::NumericAbort(_) => 3,
            NashError::Format { .. } | NashError::Csv(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, NashError>;
