use thiserror::Error;

/// Errors surfaced by every part of the workbench.
///
/// The variants map onto the CLI exit-code categories: configuration problems,
/// invalid arguments, numerical failures, wire-protocol failures, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical error in `{op}`: {detail}")]
    Numerical { op: &'static str, detail: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("protocol error: malformed message at byte {offset}: {detail}")]
    Decode { offset: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
