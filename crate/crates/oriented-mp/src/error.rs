//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// An index is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// An argument violates a precondition.
    #[error("argument error: {0}")]
    Argument(String),

    /// Layer widths, channel counts or run configuration do not chain.
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset file is malformed; `offset` is the byte position of the defect.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Optimizer or autodiff state is inconsistent (e.g. missing gradients).
    #[error("state error: {0}")]
    State(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for CLI commands, per the documented contract:
    /// 2 = argument error, 3 = I/O or file format error, 4 = config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 2,
            Error::Io(_) | Error::Format { .. } => 3,
            Error::Config(_) => 4,
            _ => 1,
        }
    }
}
