use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or hyperparameters that cannot describe a valid model, adapter or plan.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("invocation sequence {sequence:?} not found in tokens")]
    NotInvoked { sequence: Vec<u32> },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("report error: {0}")]
    Report(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Process exit statuses of the command-line tool.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const VERIFICATION_FAILED: i32 = 1;
    pub const CONFIGURATION: i32 = 2;
    pub const IO: i32 = 3;
}

impl Error {
    /// Exit status for a command that stopped with this error. Unreadable
    /// artifacts count as I/O failures; a diverged run or an unbuildable
    /// report counts as a failed run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::NotInvoked { .. } => exit::CONFIGURATION,
            Error::Io { .. } | Error::Format { .. } => exit::IO,
            Error::Diverged { .. } | Error::Report(_) => exit::VERIFICATION_FAILED,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
