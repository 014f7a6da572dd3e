use std::path::PathBuf;

/// Errors raised by the attack framework.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("directory not found: {0}")]
    MissingDirectory(PathBuf),

    #[error("no images found in {0}")]
    NoImages(PathBuf),

    #[error("annotation file {path}: {message}")]
    Annotation { path: PathBuf, message: String },

    #[error("canvas {height}x{width} is too small to place a face glyph (need at least {min}x{min})")]
    CanvasTooSmall { height: usize, width: usize, min: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("JPEG encoding failed at quality {quality}: {message}")]
    Jpeg { quality: u8, message: String },

    #[error("non-finite loss at {stage} {index}")]
    NonFiniteLoss { stage: &'static str, index: usize },

    #[error("non-finite logits in score matrix")]
    NonFiniteLogits,

    #[error("dataset has no positive boxes")]
    NoPositives,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
