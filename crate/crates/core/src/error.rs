use std::fmt;
use std::io;
use std::path::PathBuf;

/// Error type shared by all modules in this crate.
#[derive(Debug)]
pub enum Error {
    /// File-level I/O failure, annotated with the path involved.
    Io { path: PathBuf, source: io::Error },
    /// On-disk data that does not parse or does not match its manifest.
    Format(String),
    /// Dimension or shape mismatch between tensors.
    Shape(String),
    /// Invalid numeric input or a diverged computation.
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
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

pub type Result<T> = std::result::Result<T, Error>;
