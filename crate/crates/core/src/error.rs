//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image format error: {0}")]
    Image(#[from] image::ImageError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("inconsistent structure: {0}")]
    Structure(String),

    #[error("weights error: {0}")]
    Weights(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    pub fn weights(msg: impl Into<String>) -> Self {
        Error::Weights(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
