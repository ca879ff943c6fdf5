use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    /// Malformed file contents or a payload that disagrees with its metadata.
    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("render output carries no march cache; re-render with caching enabled")]
    MissingCache,

    #[error("protocol error{}: {msg}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Protocol { step: Option<usize>, msg: String },

    #[error("scorer error: {0}")]
    Scorer(String),

    #[error("image encoding error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol { step: None, msg: msg.into() }
    }

    /// Attaches an optimization step index to protocol errors.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Protocol { msg, .. } => Error::Protocol { step: Some(step), msg },
            other => other,
        }
    }
}
