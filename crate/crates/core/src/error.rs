use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ScanetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ScanetError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown parameter or buffer `{0}`")]
    UnknownParam(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("cannot decode `{path}`: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("loss diverged (non-finite) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ScanetError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        ScanetError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ScanetError::InvalidArgument(msg.into())
    }
}
