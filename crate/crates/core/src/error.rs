//! Error type shared across the crate.
//!
//! Variants are grouped into three categories that the CLI maps onto exit
//! codes: usage errors (bad arguments, bad geometry, shape mismatches),
//! data errors (I/O, file formats, corrupt datasets), and numeric failures
//! (NaN losses, undefined statistics).

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt dataset: {0}")]
    CorruptData(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// Coarse failure class, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::InvalidArgument(_) | Error::InvalidGeometry(_) | Error::ShapeMismatch(_) => {
                Category::Usage
            }
            Error::Io { .. } | Error::Format(_) | Error::CorruptData(_) => Category::Data,
            Error::Numeric(_) => Category::Numeric,
        }
    }
}
