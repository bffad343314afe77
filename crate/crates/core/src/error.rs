use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure reading or writing a `CEB1` bag file.
///
/// Each variant maps to a stable numeric code so that tooling can tell the
/// cases apart without parsing messages.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected `CEB1`, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("bag has zero instances")]
    ZeroInstances,
    #[error("bag has zero embedding dimension")]
    ZeroDim,
    #[error("slide id is not valid UTF-8")]
    InvalidSlideId,
    #[error("slide id longer than 65535 bytes")]
    SlideIdTooLong,
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
}

impl FormatError {
    pub fn code(&self) -> u32 {
        match self {
            FormatError::BadMagic(_) => 1,
            FormatError::BadVersion(_) => 2,
            FormatError::Truncated { .. } => 3,
            FormatError::ZeroInstances => 4,
            FormatError::ZeroDim => 5,
            FormatError::InvalidSlideId => 6,
            FormatError::SlideIdTooLong => 7,
            FormatError::TrailingBytes(_) => 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("training data contains a single class")]
    SingleClass,
    #[error("class {class} has {available} members, {requested} requested")]
    InsufficientClass {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("no bimodality: all values are identical")]
    NoBimodality,
    #[error("no positive samples")]
    NoPositives,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("bag format: {0}")]
    Format(#[from] FormatError),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
