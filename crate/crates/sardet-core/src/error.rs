//! Error type shared by every module in the crate.

use std::fmt;

/// Crate-wide error enum. Variants map onto the CLI exit classes:
/// `Config` is a usage problem, everything else is a runtime failure.
#[derive(Debug)]
pub enum Error {
    /// Tensor or feature-map shapes do not satisfy an operation's contract.
    Shape(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Non-finite values or other numeric contract violations.
    Numeric(String),
    /// Synthetic scene generation could not satisfy its constraints.
    Generation(String),
    /// Checkpoint file is corrupt, truncated or incompatible.
    Checkpoint(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Generation(m) => write!(f, "generation error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
