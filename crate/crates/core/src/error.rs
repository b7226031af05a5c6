use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: non-finite value ({detail})")]
    NonFiniteValue { line: usize, detail: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("utterance {id}: missing feature '{feature}'")]
    MissingFeature { id: String, feature: &'static str },

    #[error("utterance {id}: too short ({message})")]
    TooShort { id: String, message: String },

    #[error("degenerate length: {0}")]
    DegenerateLength(String),

    #[error("utterance {id}: cer required but absent")]
    CerRequired { id: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("duplicate utterance id '{0}'")]
    DuplicateId(String),
}

impl Error {
    /// Short machine-parseable category used on the command line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedLine { .. } => "malformed-line",
            Error::NonFiniteValue { .. } => "non-finite-value",
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::MissingFeature { .. } => "missing-feature",
            Error::TooShort { .. } => "too-short",
            Error::DegenerateLength(_) => "degenerate-length",
            Error::CerRequired { .. } => "cer-required",
            Error::Empty(_) => "empty-input",
            Error::DegenerateFit(_) => "degenerate-fit",
            Error::InvalidConfig(_) => "invalid-config",
            Error::Checkpoint(_) => "checkpoint",
            Error::DuplicateId(_) => "duplicate-id",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
