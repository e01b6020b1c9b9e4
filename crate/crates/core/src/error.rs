//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by any subsystem of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("disparity {0} is at or below the minimum of {1} px; depth is undefined")]
    NonPositiveDisparity(f64, f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("point with Z = {0} is at or behind the camera plane")]
    BehindCamera(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("score window around ({0}, {1}) does not fit inside the image")]
    WindowOutOfBounds(usize, usize),
    #[error("image {0}x{1} is smaller than the {2}-px scoring window")]
    ImageTooSmall(usize, usize, usize),
    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss became non-finite at step {0}")]
    NonFiniteLoss(usize),
    #[error("no valid pixels: {0}")]
    NoValidPixels(String),
    #[error("pose optimization diverged: energy increased for {0} consecutive damped retries")]
    Diverged(usize),
    #[error("keyframe set is empty")]
    EmptyKeyframeSet,
    #[error("Huber delta must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("innovation covariance is singular")]
    SingularInnovationCovariance,
    #[error("timestamps are not strictly increasing at index {0}")]
    NonMonotonicTimestamps(usize),
    #[error("missing intrinsics file: {0}")]
    MissingIntrinsics(PathBuf),
    #[error("missing timestamps file: {0}")]
    MissingTimestamps(PathBuf),
    #[error("missing image file: {0}")]
    MissingImageFile(PathBuf),
    #[error("trajectories share fewer than 2 associated timestamps")]
    InsufficientOverlap,
    #[error("map contains no keyframes")]
    EmptyMap,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Codec(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Codec(e.to_string())
    }
}
