use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the lab pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ingest failure: {0}")]
    Ingest(String),

    #[error("malformed TEI document {source_id}: {message}")]
    Tei { source_id: String, message: String },

    #[error("corpus too small: {kept} kept documents, need at least 2")]
    CorpusTooSmall { kept: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("cannot collate an empty list of sequences")]
    EmptyBatch,

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("every position is masked; loss is undefined")]
    AllMasked,

    #[error("unknown LoRA target `{0}`")]
    UnknownTarget(String),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("gradient key mismatch: {0}")]
    KeyMismatch(String),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid optimizer spec: {0}")]
    OptimizerSpec(String),

    #[error("non-finite loss at step {step}; last good checkpoint: {last_good:?}")]
    NonFiniteLoss { step: usize, last_good: Option<PathBuf> },

    #[error("invalid training config: {0}")]
    TrainConfig(String),

    #[error("evaluation data yields no blocks")]
    EmptyEvalSet,

    #[error("no successful grid rows to select from")]
    NoSuccessfulRows,

    #[error("zero probability in perplexity input (infinite perplexity)")]
    ZeroProbability,

    #[error("probability {0} outside (0, 1]")]
    InvalidProbability(f64),

    #[error("text too short: {tokens} tokens, need at least {needed}")]
    TextTooShort { tokens: usize, needed: usize },

    #[error("empty text")]
    EmptyText,

    #[error("mismatched lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("empty sample `{0}`")]
    EmptySample(String),

    #[error("non-finite value in sample `{0}`")]
    NonFiniteSample(String),

    #[error("all paired differences are zero")]
    DegenerateDifferences,

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("model label `{0}` not present in report")]
    MissingLabel(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
