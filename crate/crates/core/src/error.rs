use thiserror::Error;

use crate::kvstore::KVKey;

/// Errors raised anywhere in the engine.
///
/// The variants are grouped so a driver can map them onto a small set of
/// exit statuses (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("degenerate step: t_from == t_to == {0}")]
    DegenerateStep(f64),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("kv cache miss: no entry for {0}")]
    CacheMiss(KVKey),

    #[error("kv cache collision: {0} already stored")]
    Collision(KVKey),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes used by drivers to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Io,
    Numeric,
    Cache,
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Parameter(_) => ErrorClass::Usage,
            Error::Io { .. } | Error::Format(_) | Error::Dimension(_) | Error::Shape(_) => {
                ErrorClass::Io
            }
            Error::Numeric(_) | Error::DegenerateStep(_) | Error::Empty(_) => ErrorClass::Numeric,
            Error::CacheMiss(_) | Error::Collision(_) | Error::Alignment(_) => ErrorClass::Cache,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
