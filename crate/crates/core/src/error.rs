use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants map one-to-one onto the failure classes the CLI reports through
/// its exit codes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("decode error: {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("load error: {0}")]
    Load(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("optimizer state error: {0}")]
    State(String),
    #[error("io error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Process exit code for this failure class.
    ///
    /// `0` success, `1` check failure (never produced by an `Error`), `2` io,
    /// `3` numeric abort, `4` configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Config(_) => 4,
            Error::Io { .. }
            | Error::Decode { .. }
            | Error::Load(_)
            | Error::Format(_)
            | Error::Data(_)
            | Error::Shape(_)
            | Error::Graph(_)
            | Error::State(_) => 2,
        }
    }
}
