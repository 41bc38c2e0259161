//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An experiment configuration failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    /// An operation was called on an object in the wrong state.
    #[error("invalid state: {0}")]
    State(String),

    /// A model fit could not be completed (degenerate data, singular scatter).
    #[error("fit failed: {0}")]
    Fit(String),

    /// A pipeline stage requires an artifact that has not been produced yet.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file exists but its contents do not parse as the expected format.
    #[error("format error: {0}")]
    Format(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
