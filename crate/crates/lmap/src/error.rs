use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Rejected input (non-finite values, empty corpora, bad ranges).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A file failed to parse; `location` names the line or record.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Shapes disagree between data and model parameters.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// A numeric procedure diverged or produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Bad configuration (unknown keys, invalid values).
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
