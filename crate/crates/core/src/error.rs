use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence of length {len} is shorter than window {window}")]
    EmptyOutput { len: usize, window: usize },

    #[error("target distribution is invalid: {0}")]
    InvalidTarget(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("document `{0}` is empty after tokenization")]
    EmptyDocument(String),

    #[error("phrase `{phrase}` has {len} tokens, more than the maximum n-gram length {max}")]
    PhraseTooLong { phrase: String, len: usize, max: usize },

    #[error("phrase is empty after normalization")]
    EmptyPhrase,

    #[error("no keyphrase of document `{0}` matches within the truncated text")]
    NoMatch(String),

    #[error("document `{id}`: {reason}")]
    Visual { id: String, reason: String },

    #[error("layout parse error at line {line}, column {column}: {message}")]
    LayoutParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("layout alignment error: {0}")]
    Alignment(String),

    #[error("no contextual vectors for document `{0}`")]
    MissingVectors(String),

    #[error("no unmasked spans to score")]
    NoValidSpans,

    #[error("k must be positive")]
    InvalidDepth,

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),

    #[error("warm start shape mismatch: {0:?}")]
    WarmStartMismatch(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
