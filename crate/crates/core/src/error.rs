//! Error type shared by every estimator and the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("non-binary treatment at t={t} (value {value})")]
    NonBinaryTreatment { t: usize, value: String },
    #[error("non-finite value at t={t} in column {column}")]
    NonFiniteValue { t: usize, column: String },
    #[error("time index must be contiguous integers from 0; bad row {row}")]
    UnsortedTime { row: usize },
    #[error("column spec out of range: {0}")]
    SpecOutOfRange(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("unsupported spec: {0}")]
    UnsupportedSpec(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("insufficient points: {0}")]
    InsufficientPoints(String),
    #[error("perfect separation: {0}")]
    PerfectSeparation(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("empty kernel window at evaluation point {0:?}")]
    EmptyWindow(Vec<f64>),
    #[error("overlap violation at t={t}: propensity {e:e} is numerically at a boundary")]
    OverlapViolation { t: usize, e: f64 },
    #[error("empty subsample for previous-treatment state w={0}")]
    EmptySubsample(u8),
    #[error("replication on stream {stream} failed: {source}")]
    Replication {
        stream: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable code used in structured CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::NonBinaryTreatment { .. } => "NonBinaryTreatment",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::UnsortedTime { .. } => "UnsortedTime",
            Error::SpecOutOfRange(_) => "SpecOutOfRange",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::UnsupportedSpec(_) => "UnsupportedSpec",
            Error::InsufficientData(_) => "InsufficientData",
            Error::InsufficientPoints(_) => "InsufficientPoints",
            Error::PerfectSeparation(_) => "PerfectSeparation",
            Error::DegenerateDesign(_) => "DegenerateDesign",
            Error::EmptyWindow(_) => "EmptyWindow",
            Error::OverlapViolation { .. } => "OverlapViolation",
            Error::EmptySubsample(_) => "EmptySubsample",
            Error::Replication { source, .. } => source.code(),
            Error::Usage(_) => "UsageError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }

    /// Process exit status class: 1 for validation errors, 2 for numerical errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::PerfectSeparation(_)
            | Error::DegenerateDesign(_)
            | Error::EmptyWindow(_)
            | Error::OverlapViolation { .. }
            | Error::EmptySubsample(_) => 2,
            Error::Replication { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
