use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Inputs for which an operation is undefined, e.g. normalizing a zero vector.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Well-formed but out-of-contract inputs (out-of-domain positions, short episodes).
    #[error("input error: {0}")]
    Input(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
