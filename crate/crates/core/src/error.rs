use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReidError {
    #[error("malformed filename `{0}`: expected <pid>_<cid>_c<cam>_<frame>.<ext>")]
    MalformedFilename(String),
    #[error("missing directory {}", .0.display())]
    MissingDirectory(PathBuf),
    #[error("split `{0}` contains no images")]
    EmptySplit(String),
    #[error("cloth id {cloth_id} appears under person ids {first} and {second}")]
    InconsistentClothLabel { cloth_id: u32, first: u32, second: u32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid identity counts: {0}")]
    InvalidCounts(String),
    #[error("expected {expected} keypoints, got {got}")]
    WrongArity { expected: usize, got: usize },
    #[error("image dimensions must be positive, got {width}x{height}")]
    NonPositiveDimensions { width: f64, height: f64 },
    #[error("semantic index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("invalid augmentation parameters: {0}")]
    InvalidParams(String),
    #[error("no keypoint record for image `{0}`")]
    MissingKeypoints(String),
    #[error("loss diverged at epoch {epoch}, step {step}: {detail}")]
    DivergedLoss { epoch: usize, step: usize, detail: String },
    #[error("no query has a valid correct match in the gallery")]
    NoValidQueries,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ReidError> = std::result::Result<T, E>;
