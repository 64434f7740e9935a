use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum KwsError {
    #[error("malformed WAV: {0}")]
    Format(String),
    #[error("unsupported audio encoding: {0}")]
    Unsupported(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("dsp error: {0}")]
    Dsp(String),
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, KwsError>;

impl KwsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        KwsError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KwsError::Io {
            path: path.into(),
            source,
        }
    }
}
