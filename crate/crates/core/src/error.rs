use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("adapter for {target} has shape {got:?}, expected {expected:?}")]
    AdapterShape {
        target: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot aggregate an empty reward set")]
    EmptyRewardSet,

    #[error(
        "LoRA ensemble requires a reward-pretrained backbone: finetune the backbone and heads \
         as a linear-layer ensemble on a phase-1 subset first"
    )]
    MissingPretrainedBackbone,

    #[error("phase-1 and phase-2 data overlap in {0} pair(s)")]
    PhaseOverlap(usize),

    #[error("empty dataset: {0}")]
    EmptyData(&'static str),

    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    NonFiniteLoss { step: usize, lr: f32, grad_norm: f32 },

    #[error("series length mismatch: {0} vs {1}")]
    SeriesLength(usize, usize),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("toml: {0}")]
    Toml(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Toml(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Toml(e.to_string())
    }
}
