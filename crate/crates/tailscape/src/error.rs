//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A dataset or generator specification violated its invariants.
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    /// A training configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Config file parse failure (bad key, bad value, bad syntax).
    #[error("config parse error: {0}")]
    ConfigParse(String),

    /// Vector or batch dimensions do not match the architecture.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Operation requires a non-empty batch.
    #[error("empty batch")]
    EmptyBatch,

    /// Sample weights must not all be zero.
    #[error("all sample weights are zero")]
    AllZeroWeights,

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Memory bank entry missing for a class.
    #[error("memory bank has no snapshot for class {0}")]
    UnpopulatedBank(usize),

    /// Fisher diagonal missing for a group the penalty must preserve.
    #[error("missing Fisher diagonal for group {0}")]
    MissingFisher(usize),

    /// Grouping request cannot be satisfied (e.g. more groups than classes).
    #[error("invalid grouping: {0}")]
    InvalidGrouping(String),

    /// A probe was called with unusable inputs (zero direction, bad grid...).
    #[error("invalid probe input: {0}")]
    InvalidProbe(String),

    /// Training hit a non-finite loss; carries a diagnostic summary.
    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    /// A checkpoint or dataset file is malformed.
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
