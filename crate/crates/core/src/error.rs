use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("matrix is not positive definite (pivot {index} = {value:e}); increase dampening")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("singular pivot at index {index} (|value| = {value:e})")]
    SingularPivot { index: usize, value: f64 },

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("cannot prune {requested} of {available} entries")]
    InfeasibleSparsity { requested: usize, available: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("input dimension {k} exceeds the exact-oracle limit of {limit}")]
    TooLargeForOracle { k: usize, limit: usize },

    #[error("malformed CSR structure: {0}")]
    MalformedCsr(String),

    #[error("bad magic in {path}: expected \"DSPM\"")]
    BadMagic { path: PathBuf },

    #[error("unsupported matrix file version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u8 },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at flat index {index} in {path}")]
    NonFiniteValue { path: PathBuf, index: usize },

    #[error("invalid matrix file {path}: {reason}")]
    InvalidFile { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures caused by the numerics rather than by inputs or files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::SingularPivot { .. }
                | Error::InfeasibleSparsity { .. }
                | Error::NumericalBreakdown(_)
                | Error::TooLargeForOracle { .. }
        )
    }

    /// True for file system, format and parse failures.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion { .. }
                | Error::TruncatedPayload { .. }
                | Error::NonFiniteValue { .. }
                | Error::InvalidFile { .. }
                | Error::Io { .. }
                | Error::Json { .. }
        )
    }
}
