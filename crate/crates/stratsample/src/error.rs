//! Crate-wide error type for pipeline, evaluation, and dataset operations.

use std::path::PathBuf;

use thiserror::Error;

use crate::backend::BackendError;
use crate::strata::CoreError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{stage}: {message}")]
    Parse { stage: &'static str, message: String },

    #[error("empty property list")]
    EmptyPropertyList,

    #[error("cache entry at {path} is unreadable: {message}")]
    Cache { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    KbFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("seed property {0:?} is blacklisted")]
    BlacklistedSeed(String),

    #[error("dataset error at {path}: {message}")]
    Dataset { path: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parse(stage: &'static str, message: impl Into<String>) -> Self {
        Error::Parse {
            stage,
            message: message.into(),
        }
    }

    pub fn dataset(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            message: message.into(),
        }
    }
}
