use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, index out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("format error in {context} at byte offset {offset}: {message}")]
    FormatAt {
        context: String,
        offset: u64,
        message: String,
    },

    #[error("format error in {context} at line {line}: {message}")]
    FormatLine {
        context: String,
        line: usize,
        message: String,
    },

    #[error("checksum mismatch: file is corrupt or was modified")]
    Checksum,

    #[error("incompatible format version {found} (this build reads version {expected})")]
    Version { found: u16, expected: u16 },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for returning a [`Error::Contract`] from a formatted message.
macro_rules! contract {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Contract(format!($($arg)*)))
    };
}
pub(crate) use contract;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
