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
    #[error("dataset {0} is empty")]
    EmptyDataset(String),
    #[error("line {line}: non-numeric token {token:?}")]
    NonNumeric { line: usize, token: String },
    #[error("line {line}: expected a label and at least one value")]
    TooFewFields { line: usize },
    #[error("need at least {need} samples to split, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("window length {m} exceeds series length {t}")]
    WindowTooLong { m: usize, t: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no admissible shape length for T={t}, q={q}")]
    NoCandidates { t: usize, q: usize },
    #[error("index {index} out of range for {len} records")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("unknown embedding stage {0:?}")]
    UnknownStage(String),
    #[error("label {0} is not among the trained classes")]
    UnknownLabel(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
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
