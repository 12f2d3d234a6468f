use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    OutOfVocabulary { id: usize, vocab_size: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parse error in {file} at line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("gradient check invalid: {0}")]
    CheckInvalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss in batch [{}]: {detail}", batch_ids.join(", "))]
    NonFiniteLoss {
        batch_ids: Vec<String>,
        detail: String,
    },

    #[error("refusing to overwrite existing output {0} (pass --overwrite)")]
    Clobber(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::NumericDomain(msg.into())
    }
}
