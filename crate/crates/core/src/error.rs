use std::path::PathBuf;

use reidapt_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, ReidError>;

#[derive(Debug, Error)]
pub enum ReidError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("identity {0} appears in fewer than two cameras")]
    SingleCameraIdentity(u32),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("anchor {0} has no positive in the batch")]
    NoPositive(usize),
    #[error("anchor {0} has no negative in the batch")]
    NoNegative(usize),
    #[error("combined loss needs logits")]
    MissingLogits,
    #[error("need {needed} identities for the batch, dataset has {available}")]
    TooFewIdentities { needed: usize, available: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("k = {k} exceeds the {population} samples of camera {camera}")]
    KExceedsPopulation { k: usize, population: usize, camera: u32 },
    #[error("cameras have unequal cluster counts: {0:?}")]
    UnequalK(Vec<usize>),
    #[error("sample {0} is not covered by the pseudo-label map")]
    UncoveredSample(u32),
    #[error("query {0} has no cross-camera positive in the gallery")]
    NoPositiveForQuery(usize),
    #[error("training labels are hidden for the {0} domain")]
    HiddenLabels(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("checkpoint {path}: unsupported version {found} (expected {expected})")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} requires {requires} to have run first")]
    MissingDependency { stage: String, requires: String },
}

impl ReidError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Corrupt { path: path.into(), reason: reason.into() }
    }
}
