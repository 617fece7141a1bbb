use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // tokenizer
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary size {requested} is smaller than the {required} entries required by specials and characters")]
    VocabSizeTooSmall { requested: usize, required: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    // encoder
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("every position is masked")]
    AllPositionsMasked,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    // losses / training
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    // index
    #[error("collection is empty")]
    EmptyCollection,
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("query set is empty")]
    EmptyQuerySet,
    #[error("malformed index file: {0}")]
    IndexFormat(String),

    // evaluation
    #[error("query {0} has no judgments")]
    QueryMissingJudgments(String),
    #[error("query sets differ between systems")]
    MismatchedQuerySets,
    #[error("significance test needs {0}")]
    InsufficientData(String),

    // data
    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine { path: PathBuf, line: usize, reason: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("{kind} {id} referenced but not present")]
    DanglingReference { kind: &'static str, id: String },

    // pipeline
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage { stage: String, source: Box<Error> },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes; the CLI maps them to exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) | Error::Config(_) | Error::VocabSizeTooSmall { .. } => ErrorClass::Config,
            Error::NonFiniteLoss { .. } => ErrorClass::Numeric,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
