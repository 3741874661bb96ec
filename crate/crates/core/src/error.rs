use std::path::PathBuf;

use thiserror::Error;

use crate::transforms::TransformKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dimensions: {0}")]
    Dimensions(String),

    #[error("video {video_id} too short: {length} frames, need at least {required}")]
    VideoTooShort {
        video_id: usize,
        length: usize,
        required: usize,
    },

    #[error("frame directory {dir}: {reason}")]
    Frames { dir: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("{kind} transform failed: {source}")]
    Transform {
        kind: TransformKind,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid label {label} for label space {label_space}")]
    Label { label: usize, label_space: usize },

    #[error("vector not unit norm (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parameter structures differ: {0}")]
    Structure(String),

    #[error("invalid index {index} (size {size})")]
    Index { index: usize, size: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("run aborted at epoch {epoch} step {step}: {source}")]
    Run {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("report: {0}")]
    Report(String),

    #[error("plot: {0}")]
    Plot(String),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
