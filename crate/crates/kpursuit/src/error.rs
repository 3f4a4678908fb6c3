//! Crate-wide error type.

use std::path::PathBuf;

use crate::pursuit::PursuitStep;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // ---- corpus ----
    #[error("document contains no words")]
    EmptyDocument,
    #[error("duplicate fact id: {0}")]
    DuplicateFactId(String),
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("fact {id} has {word_count} words, exceeding block size {block_size}")]
    BlockSizeExceeded {
        id: String,
        word_count: usize,
        block_size: usize,
    },

    // ---- embedding ----
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("text has {tokens} tokens, over the provider limit of {max_tokens}")]
    OverLength { tokens: usize, max_tokens: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding contains a non-finite component")]
    NonFiniteEmbedding,
    #[error("centroid of an empty embedding list")]
    EmptyEmbeddingList,
    #[error("transport failure talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },

    // ---- index ----
    #[error("fact store is empty")]
    EmptyStore,
    #[error("index has no active entries")]
    EmptyIndex,
    #[error("unknown fact id: {0}")]
    UnknownFactId(String),
    #[error("fact {0} was already removed")]
    AlreadyRemoved(String),
    #[error("search k must be at least 1")]
    InvalidK,
    #[error("index build aborted after {embedded} of {total} facts: {source}")]
    BuildAborted {
        embedded: usize,
        total: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("malformed index file: {0}")]
    MalformedIndex(String),

    // ---- pursuit ----
    /// Provider failure mid-loop; carries the steps completed before the
    /// abort.
    #[error("pursuit aborted after {} completed steps: {source}", .steps.len())]
    PursuitAborted {
        steps: Vec<PursuitStep>,
        #[source]
        source: Box<Error>,
    },

    // ---- aggregation ----
    #[error("bundle carries vision fields but the provider is text-only")]
    ModalityMismatch,
    #[error("instruction has {tokens} tokens, over the provider context limit of {max_tokens}; reduce max_facts")]
    OverBudget { tokens: usize, max_tokens: usize },
    #[error("completion lacks the indexed list structure: {0}")]
    MalformedCompletion(String),
    #[error("diversity output has {got} variants, fewer than the requested minimum {min}")]
    TooFewVariants { got: usize, min: usize },
    #[error("invalid diversity range {min}..{max}: lower bound must be at least 2")]
    InvalidDiversityRange { min: usize, max: usize },

    // ---- generation ----
    #[error(
        "ancestral step {step}: alpha_bar is 1 with nonzero predicted noise (division by zero)"
    )]
    DegenerateStep { step: usize },
    #[error("noise predictor failed at step {step}: {source}")]
    PredictorFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("schedule is inconsistent: {0}")]
    InvalidSchedule(String),
    #[error("generator backend {backend} rejected the request: {message}")]
    Backend { backend: String, message: String },

    // ---- interface ----
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown provider: {0}")]
    UnknownProvider(String),
    #[error("configured path does not exist: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with the pipeline stage it happened in.
    pub fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The stage name if this is a stage-attributed error.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
