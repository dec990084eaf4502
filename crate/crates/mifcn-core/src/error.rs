//! Error type shared by every module in this crate.
//!
//! Variants are grouped by what the caller can do about them: `Shape` and
//! `Domain` are programming or configuration mistakes caught at API
//! boundaries, `Io`/`Format`/`Data` are problems with files on disk, and
//! `Numeric` marks runs that produced non-finite values and cannot continue.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// Tensor shapes or structural preconditions do not line up.
    Shape(String),
    /// Mathematically invalid input, e.g. division by zero or a bad rectangle.
    Domain(String),
    /// Underlying filesystem failure with the path that triggered it.
    Io { path: PathBuf, source: std::io::Error },
    /// A file exists but its contents do not parse as the expected format.
    Format(String),
    /// Inputs parsed fine but are inconsistent or incomplete as a dataset.
    Data(String),
    /// A computation produced NaN or infinity where a finite value is required.
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
