use std::path::PathBuf;

use spa_diff::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpaError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite {what}")]
    NonFinite { what: String },
}

impl SpaError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SpaError {
        let path = path.into();
        move |source| SpaError::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> SpaError {
        SpaError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn invalid(reason: impl Into<String>) -> SpaError {
        SpaError::Invalid(reason.into())
    }
}

pub type Result<T> = std::result::Result<T, SpaError>;
