use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure category, used by the command line front end to pick an
/// exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Backend,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: no records")]
    NoRecords { path: PathBuf },

    #[error("{path}:{line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record {record}: unknown label {label:?}")]
    UnknownLabel { record: String, label: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("item {0:?} is unlabeled")]
    Unlabeled(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("class {class:?} has {count} items, fewer than the {k} folds requested")]
    FoldsExceedClass { class: String, count: usize, k: usize },

    #[error("empty vocabulary after filtering tokens with document frequency < {min_doc_freq}")]
    EmptyVocabulary { min_doc_freq: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("backend `{command}`: {message}")]
    Backend { command: String, message: String },

    #[error("self-training iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("ensemble run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("annotation rejected: {0}")]
    Annotation(#[from] crate::review::Rejection),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Backend { .. } => ErrorKind::Backend,
            Error::Iteration { source, .. } | Error::Run { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}
