use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("dataset error: {0}")]
    Data(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, SpnError>;

impl SpnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpnError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        SpnError::Format { path: path.into(), msg: msg.into() }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::SpnError::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
