use std::path::PathBuf;

use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An estimator could not be evaluated on the data it was given.
    #[error("undefined score: {0}")]
    UndefinedScore(String),

    /// A metric is undefined for the input, usually because only one class is present.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("config error: {0}")]
    Config(String),

    #[error("ingest error in {path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
