use thiserror::Error;

/// Errors raised by the core library.
///
/// `Validation` covers bad inputs and configuration; everything else is a
/// runtime failure. The CLI maps the two groups onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidField { field: String, reason: String },

    #[error("{0}")]
    Validation(String),

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("sample `{sample}` violates an invariant: {reason}")]
    InvalidSample { sample: String, reason: String },

    #[error("no tasks")]
    NoTasks,

    #[error("zero-length vector")]
    ZeroVector,

    #[error("vector is not unit length (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("empty token sequence")]
    EmptyInput,

    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: usize, vocab: usize },

    #[error("no task keys: cannot infer a task before the first task is learned")]
    NoTaskKeys,

    #[error("missing prompt: {0}")]
    MissingPrompt(String),

    #[error("memory buffer is empty")]
    EmptyMemory,

    #[error("task {0} has no memory samples")]
    NoMemoryForTask(u32),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("model has not learned any task yet")]
    Untrained,

    #[error("empty test set for task {0}")]
    EmptyTestSet(u32),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("digest mismatch for {what}: expected {expected}, found {found}")]
    DigestMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("query encoder mismatch: {0}")]
    EncoderMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn field(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidField {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input rather than by a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidField { .. }
                | Error::Validation(_)
                | Error::Parse { .. }
                | Error::InvalidSample { .. }
                | Error::NoTasks
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
