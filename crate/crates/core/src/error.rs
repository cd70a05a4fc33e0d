use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid activation map: {0}")]
    InvalidMap(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("metadata carries no step records")]
    NoSteps,

    #[error("sample {sample_id}: no denoising step retains the full image span")]
    NoValidStep { sample_id: String },

    #[error("image span [{start}, {end}) exceeds hidden sequence length {len}")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("invalid kernel size {size} for a {height}x{width} map")]
    InvalidKernel {
        size: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sample has no ground-truth masks")]
    NoMasks,

    #[error("variant report needs concise, original, verbose and repeated samples")]
    NoVariants,

    #[error("config: {0}")]
    Config(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("metadata: {0}")]
    Metadata(String),

    #[error("npy file {path}: {message}")]
    Npy { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
