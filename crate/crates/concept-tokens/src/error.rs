use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("definition {index} contains no surface-form occurrence")]
    NoOccurrence { index: usize },

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("sequence of {len} tokens exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("token {0:?} is already present in the vocabulary")]
    TokenExists(String),

    #[error("non-finite {what} at phase {phase}, epoch {epoch}, example {example}")]
    NonFinite {
        what: &'static str,
        phase: usize,
        epoch: usize,
        example: usize,
    },

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("artifact checksum mismatch: expected {expected}, got {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("embedding dimension {artifact} does not match model dimension {model}")]
    DimMismatch { artifact: usize, model: usize },

    #[error("template error: {0}")]
    Template(String),

    #[error("judge transport error: {0}")]
    JudgeTransport(String),

    #[error("judge response not parseable as a label after {attempts} attempts: {raw:?}")]
    JudgeParse { attempts: usize, raw: String },

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("json error: {0}")]
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

pub type Result<T> = std::result::Result<T, Error>;
