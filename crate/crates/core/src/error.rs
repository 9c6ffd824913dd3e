use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("duplicate patient id {id:?} on lines {first} and {second}")]
    DuplicatePatient {
        id: String,
        first: usize,
        second: usize,
    },

    #[error("invalid outcome on line {line}: {reason}")]
    InvalidOutcome { line: usize, reason: String },

    #[error("embedding container truncated at byte offset {offset}")]
    Truncated { offset: u64 },

    #[error("embedding dim mismatch: patient {patient:?} has dim {found}, expected {expected}")]
    DimMismatch {
        patient: String,
        expected: usize,
        found: usize,
    },

    #[error("no patient is present in every modality (per-modality counts: {counts:?})")]
    EmptyIntersection { counts: Vec<(String, usize)> },

    #[error("no events observed")]
    NoEvents,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("cox fit failed to converge: {0}")]
    NonConvergence(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("could not draw valid sub-splits for endpoint {endpoint} after {attempts} attempts")]
    SplitRetriesExhausted { endpoint: String, attempts: usize },

    #[error("fold {fold} failed: {cause}")]
    FoldFailed { fold: usize, cause: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
