use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse error: {0}")]
    ManifestParse(String),

    #[error("utterance {utt_id}: unknown label {label:?}")]
    UnknownLabel { utt_id: String, label: String },

    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },

    #[error("{record}: {message}")]
    InvalidRecord { record: String, message: String },

    #[error("{path}: bad magic {found:?}, expected \"EMF1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: header declares {rows}x{cols} ({expected} bytes of payload) but file holds {actual}")]
    SizeMismatch {
        path: PathBuf,
        rows: u32,
        cols: u32,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: non-finite value at ({row}, {col})")]
    NonFinite { path: PathBuf, row: usize, col: usize },

    #[error("empty feature matrix ({rows}x{cols})")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("unknown split {0:?}")]
    UnknownSplit(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("class {class} has zero count; class weights are undefined")]
    ZeroClassCount { class: usize },

    #[error("no anchor in the batch has a positive; contrastive loss is undefined")]
    NoPositives,

    #[error("row {row} is not a probability vector (sum {sum})")]
    NotSimplex { row: usize, sum: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("{0}")]
    Pipeline(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Errors that stem from invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Diverged { .. } | Error::Pipeline(_))
    }
}
