use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input. `offset` is a byte offset for binary input and a
    /// 1-based line number for text input.
    #[error("parse error at {location} {offset}: {message}")]
    Parse {
        location: &'static str,
        offset: usize,
        message: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("packed matrix is corrupt: {0}")]
    Corrupt(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_byte(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            location: "byte",
            offset,
            message: message.into(),
        }
    }

    pub fn at_line(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            location: "line",
            offset: line,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
