use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss {loss} at step {step} (stage {stage})")]
    NonFiniteLoss { loss: f64, step: u64, stage: String },

    #[error("backend unavailable: {0}")]
    Backend(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input files or records rather than by
    /// the runtime.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Record { .. }
                | Error::DuplicateId(_)
                | Error::InvalidRecord(_)
                | Error::Empty(_)
                | Error::Shape(_)
                | Error::Json(_)
                | Error::Checkpoint(_)
        )
    }
}
