use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum SincError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid band: {0}")]
    InvalidBand(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SincError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SincError::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SincError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SincError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        SincError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = SincError> = std::result::Result<T, E>;
