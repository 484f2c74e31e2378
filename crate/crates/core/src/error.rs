use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MimError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("missing or invalid attribute `{attr}` for primitive {op}")]
    Attribute { op: &'static str, attr: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("expected lo < hi for normalization, got lo={lo} hi={hi}")]
    InvalidRange { lo: f32, hi: f32 },

    #[error("payload length mismatch for {path}: expected {expected} bytes, found {found}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unknown dtype tag `{0}`")]
    UnknownDtype(String),

    #[error("volume of spatial shape {found:?} is smaller than level-1 shape {needed:?}")]
    VolumeTooSmall { found: [usize; 3], needed: [usize; 3] },

    #[error("shape {shape:?} is not divisible by grid {grid}")]
    Divisibility { shape: [usize; 3], grid: usize },

    #[error("fan-out {fanout} exceeds source set of {available} tokens")]
    FanoutExceedsSource { fanout: usize, available: usize },

    #[error("zero-length vector in {0}")]
    ZeroVector(&'static str),

    #[error("{0}")]
    Loss(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("missing labels for volume {0}")]
    MissingLabels(String),

    #[error("empty dataset in {0}")]
    EmptyDataset(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl MimError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MimError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MimError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        MimError::Json {
            path: path.into(),
            source,
        }
    }
}
