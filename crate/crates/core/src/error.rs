use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate intensity range [{min}, {max}]")]
    DegenerateRange { min: f64, max: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("image {index}: {source}")]
    AtImage {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Codec(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn at_path(self, path: impl Into<PathBuf>) -> Self {
        Error::Path { path: path.into(), source: Box::new(self) }
    }

    pub(crate) fn at_image(self, index: usize) -> Self {
        Error::AtImage { index, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
