use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on caller-supplied values was violated.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical failure: {message} (after {iterations} iterations)")]
    Numerical { message: String, iterations: usize },

    /// Missing or duplicate agents, or other violations of the one-shot exchange.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("malformed wire message: {0}")]
    Format(String),

    #[error("wire message length mismatch: expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("bad data: {0}")]
    Data(String),

    #[error("run failed: {0}")]
    Run(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
