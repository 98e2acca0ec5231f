use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("OKS is undefined: no ground-truth keypoint is visible")]
    NoVisibleGroundTruth,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid pooling target {target_h}x{target_w} for a {src_h}x{src_w} mask")]
    InvalidTarget {
        src_h: usize,
        src_w: usize,
        target_h: usize,
        target_w: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("resolution mismatch: expected {expected:?}, got {got:?}")]
    ResolutionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("generator is already at its final resolution")]
    AlreadyAtMaxResolution,
    #[error("expected {expected} feature levels, got {got}")]
    LevelCountMismatch { expected: usize, got: usize },
    #[error("discriminator expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("loss needs at least one logit level")]
    EmptyLevelList,
    #[error("every patch at every level is known; nothing was generated")]
    AllPatchesKnown,
    #[error("batch at {got:?} does not match the current stage resolution {expected:?}")]
    StageMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("already at the final training stage")]
    FinalStage,
    #[error("need at least 2 samples for feature statistics, got {0}")]
    TooFewSamples(usize),
    #[error("covariance product has eigenvalue {0} below the PSD tolerance")]
    NonPsd(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {0}: annotation file is missing")]
    MissingAnnotation(String),
    #[error("sample {id}: image {path} is unreadable: {reason}")]
    CorruptImage {
        id: String,
        path: PathBuf,
        reason: String,
    },
    #[error("schema mismatch: {0}")]
    SchemaVersionMismatch(String),
    #[error("unknown metric `{0}` (expected oks, fid or ppl)")]
    UnknownMetric(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: {what}")]
    NonFinite { step: u64, what: String },
    #[error("sample {0}: composited output altered a known pixel")]
    KnownPixelViolation(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
