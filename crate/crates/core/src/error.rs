use std::path::PathBuf;

/// Errors raised by the propot pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("record {index}: missing or invalid field `{field}`")]
    MalformedRecord { index: usize, field: String },
    #[error("identity `{label}` appears in both {first} and {second} splits")]
    IdentityInTwoSplits {
        label: String,
        first: String,
        second: String,
    },
    #[error("identity {0} has no instances in modality {1}")]
    EmptyIdentity(usize, &'static str),
    #[error("batch size {batch} exceeds {available} available pairs")]
    BatchTooLarge { batch: usize, available: usize },
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("identity {0} in batch has no prototype row")]
    MissingPrototype(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("embedding file: {0}")]
    EmbeddingFile(String),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error class, used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::NonFinite(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
