use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: column `{column}` not found in header")]
    MissingColumn { column: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: cannot parse {value:?} as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("non-finite value at row {row}, column `{column}`")]
    NonFinite { row: usize, column: String },

    #[error("missing value at row {row}, column `{column}`")]
    MissingValue { row: usize, column: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("normal matrix is singular (rank deficient); retry with a positive ridge")]
    RankDeficient,

    #[error("under-determined fit: {0}")]
    UnderDetermined(String),

    #[error("feature {feature} has zero residual variance (sigma = {sigma:e}); enable the variance floor to continue")]
    DegenerateFeature { feature: usize, sigma: f64 },

    #[error("group {group} has {size} member(s); at least 2 are required")]
    GroupTooSmall { group: usize, size: usize },

    #[error("empirical Bayes did not converge after {iterations} iterations (group {group}, feature {feature}, last change {residual:e})")]
    NotConverged {
        iterations: usize,
        group: usize,
        feature: usize,
        residual: f64,
    },

    #[error("unknown group index {0}")]
    UnknownGroup(usize),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("round {round} timed out waiting for site `{site}`")]
    RoundTimeout { round: String, site: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
