use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("failed to open {path}: {source}")]
    Open { path: PathBuf, source: std::io::Error },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// A data cell that is not a finite real number.
    #[error("row {row}, column {column} ({name}): cannot parse {value:?} as a finite number")]
    Parse {
        row: u64,
        column: usize,
        name: String,
        value: String,
    },

    #[error("no data rows in input")]
    EmptyData,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{what} too short: need at least {needed} rows, have {available}")]
    TooShort {
        what: String,
        needed: usize,
        available: usize,
    },

    #[error("retrieval library is empty")]
    EmptyLibrary,

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("continuation variant `pbcc` requires a trained continuation predictor")]
    MissingPredictor,

    #[error("variant `{0}` needs access to the training series")]
    MissingTrainSeries(&'static str),

    #[error("model has no gate parameters but an auxiliary stream was supplied")]
    MissingGate,

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("no eligible queries: {0}")]
    NoEligibleQueries(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Whether the error stems from invalid user input rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
