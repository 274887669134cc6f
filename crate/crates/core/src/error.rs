//! Error categories shared by every module.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid knob, shape, or combination of settings.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or unusable input data.
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced a non-finite value or hit an impossible numeric state.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A client/server exchange violated the aggregation contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Internal misuse, e.g. a forward tape consumed twice.
    #[error("logic error: {0}")]
    Logic(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub fn logic(msg: impl Into<String>) -> Self {
        Error::Logic(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error category.
    ///
    /// | code | category |
    /// |------|----------|
    /// | 2    | usage (emitted by the argument parser) |
    /// | 3    | config |
    /// | 4    | data |
    /// | 5    | numeric |
    /// | 6    | io |
    /// | 7    | protocol / logic |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Data(_) => 4,
            Error::Numeric(_) => 5,
            Error::Io { .. } => 6,
            Error::Protocol(_) | Error::Logic(_) => 7,
        }
    }
}
