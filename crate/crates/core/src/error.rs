use std::path::PathBuf;

use depthdiff_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Tensor(TensorError::Numeric(_)) | Error::Numeric(_) => ErrorKind::Numeric,
            Error::Tensor(TensorError::Usage(_) | TensorError::Config(_)) | Error::Config(_) | Error::Usage(_) => {
                ErrorKind::Usage
            }
            Error::Tensor(TensorError::Dimension(_)) | Error::Data(_) | Error::Format(_) | Error::Io { .. } => {
                ErrorKind::Data
            }
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
