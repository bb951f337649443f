use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: inner dimension mismatch ({left:?} x {right:?})")]
    InnerDimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{0}")]
    InvalidShape(String),

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("{op}: zero-norm input")]
    ZeroNorm { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: tape already consumed")]
    TapeConsumed,

    #[error("token {token} out of vocabulary (size {vocab})")]
    OutOfVocabulary { token: usize, vocab: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("coupling: {0}")]
    Coupling(String),

    #[error("fusion: {0}")]
    Fusion(String),

    #[error("insufficient samples: class {class} has {available}, need {needed}")]
    InsufficientSamples {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("training aborted at step {step}: non-finite loss ({detail})")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("config: {key}: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: unsupported version {found} (max supported {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checkpoint: truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint: duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("checkpoint: missing tensor {0:?}")]
    MissingTensor(String),

    #[error("checkpoint: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
