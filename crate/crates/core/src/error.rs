use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse grouping of errors, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or configuration.
    Usage,
    /// Malformed or inconsistent data and files.
    Data,
    /// A numeric procedure failed (non-convergence, NaN loss, degenerate fit).
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("duplicate sample id {0:?}")]
    DuplicateSample(String),

    #[error("unknown sample id {0:?}")]
    UnknownSample(String),

    #[error("class {0} is already known")]
    ClassCollision(u32),

    #[error("class {0} is not part of the model")]
    UnknownClass(u32),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("insufficient negatives for class {class}: {available} available, at least 2 required")]
    InsufficientNegatives { class: u32, available: usize },

    #[error("empty enrollment: no labeled classes to learn")]
    EmptyEnrollment,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no convergence after {iterations} iterations ({what})")]
    NoConvergence { what: String, iterations: usize },

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorKind::Usage,
            Error::Degenerate(_) | Error::NoConvergence { .. } | Error::Diverged(_) => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}
