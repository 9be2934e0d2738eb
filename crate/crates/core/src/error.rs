use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Ingest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("split error for dataset `{dataset}`: {message}")]
    Split { dataset: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing results for {0} (method, task) pair(s): {1}")]
    IncompleteResults(usize, String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by malformed input data rather than usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Ingest { .. }
                | Error::Split { .. }
                | Error::UnknownTask(_)
                | Error::Checkpoint(_)
                | Error::IncompleteResults(..)
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
