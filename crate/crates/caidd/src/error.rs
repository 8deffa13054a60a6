use std::path::{Path, PathBuf};

/// Errors from IO, file formats and the command line, on top of the core errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] caidd_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("usage: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Process exit code: 2 usage, 3 configuration or input, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        use caidd_core::Error as C;
        match self {
            Error::Usage(_) => 2,
            Error::Core(C::Numeric(_) | C::Degenerate(_)) => 4,
            _ => 3,
        }
    }
}
