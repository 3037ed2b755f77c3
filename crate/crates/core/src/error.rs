use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or channel counts that cannot be wired together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerically invalid data (negative variance, NaN, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("container error at byte {pos}: {msg}")]
    Container { pos: usize, msg: String },

    #[error("codec error at byte {offset}: {msg}")]
    Codec { offset: usize, msg: String },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn container(pos: usize, msg: impl Into<String>) -> Self {
        Error::Container { pos, msg: msg.into() }
    }

    pub(crate) fn codec(offset: usize, msg: impl Into<String>) -> Self {
        Error::Codec { offset, msg: msg.into() }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            _ => 3,
        }
    }
}
