use crate::image::ColorSpace;

/// Errors raised by the library. Every variant maps onto one CLI exit code
/// class (see [`Error::is_usage`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("expected a {expected:?} image, got {found:?}")]
    ColorSpace {
        expected: ColorSpace,
        found: ColorSpace,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("only {found} texture patches qualify, {needed} requested")]
    InsufficientPatches { needed: usize, found: usize },

    #[error("dictionary format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] ::image::ImageError),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for errors caused by how the program was invoked rather than by
    /// the data it was given.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidParameter(_) | Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
