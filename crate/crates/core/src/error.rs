use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("audio too short: {len} samples, window is {window}")]
    AudioTooShort { len: usize, window: usize },
    #[error("token out of vocabulary: id {token} >= {vocab_size}")]
    TokenOutOfVocabulary { token: u32, vocab_size: usize },
    #[error("degenerate projection: pre-normalization vector is zero")]
    DegenerateProjection,
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("invalid token sequence: {0}")]
    InvalidTokens(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch too small for contrastive loss: N = {0}")]
    BatchTooSmall(usize),
    #[error("not enough negatives: K = {k} but batch has only {available} off-diagonal candidates")]
    NotEnoughNegatives { k: usize, available: usize },
    #[error("inconsistent negatives: {0}")]
    InconsistentNegatives(String),
    #[error("negative loss weight: {0}")]
    NegativeWeight(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("undefined CER: empty reference")]
    UndefinedCer,
    #[error("split counts {counts:?} do not sum to dataset size {size}")]
    SplitMismatch { counts: [usize; 3], size: usize },
    #[error("malformed record at line {line}, field `{field}`: {reason}")]
    Malformed {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value: {0}")]
    NonFiniteValue(&'static str),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range for task with {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("empty test set")]
    EmptyTestSet,
    #[error("sweep size {size} exceeds available training data ({available})")]
    SizeExceedsData { size: usize, available: usize },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
