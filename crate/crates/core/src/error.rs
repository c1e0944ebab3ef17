use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid problem specification: {0}")]
    InvalidSpec(String),

    #[error("degenerate coefficients at entry {index}: {reason}")]
    Degenerate { index: usize, reason: String },

    #[error("update error at entry {index}: {reason}")]
    Update { index: usize, reason: String },

    #[error("could not bracket the dual root after {doublings} doublings")]
    Bracket { doublings: usize },

    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
