use std::fmt;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing prerequisite: {0}")]
    Precondition(String),
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(what: impl fmt::Display) -> Self {
        Error::Shape(what.to_string())
    }

    pub(crate) fn config(what: impl fmt::Display) -> Self {
        Error::Config(what.to_string())
    }
}
