//! Error type shared across the crate.
//!
//! Error kinds map onto process exit codes in the CLI: validation errors
//! exit with 2, contract errors with 3, and format errors with 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data failed validation (malformed corpus, bad config, io).
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Tensor shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A serialized artifact (checkpoint, cluster model) is malformed.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Exit code for the CLI. Shape errors are caller mistakes and share
    /// the contract code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Contract(_) | Error::Shape(_) => 3,
            Error::Format(_) => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Validation(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
