//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received a non-finite or otherwise invalid value.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An operation received an input it cannot score meaningfully
    /// (e.g. a zero-norm vector passed to cosine similarity).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Dimensions of two operands do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An index addressed a position outside its container.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A corpus line could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A record violates the dataset schema or ontology bounds.
    #[error("schema error: {0}")]
    Schema(String),

    /// A few-shot split cannot satisfy its per-class constraints.
    #[error("split error: {0}")]
    Split(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A configuration value is out of its allowed range.
    #[error("config error: {0}")]
    Config(String),

    /// Failure attributed to a specific example.
    #[error("example {id}: {source}")]
    Example {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches an example id to an error as it propagates out of
    /// per-example processing.
    pub fn for_example(self, id: &str) -> Error {
        Error::Example {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
