use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid population: {0}")]
    InvalidPopulation(String),

    #[error("invalid resource vector: {0}")]
    InvalidResource(String),

    #[error("invalid resource weights: {0}")]
    InvalidWeights(String),

    #[error("invalid cluster count k={k} for {n} points")]
    InvalidK { k: usize, n: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    /// Every cluster has zero diameter, so the Dunn index is unbounded.
    #[error("infinite separation: all cluster diameters are zero")]
    InfiniteSeparation,

    #[error("degenerate population: no cluster count in 2..={k_max} has a finite Dunn index")]
    DegeneratePopulation { k_max: usize },

    #[error("invalid compaction: cannot compact {k} clusters to {m}")]
    InvalidCompaction { k: usize, m: usize },

    #[error("invalid convergence parameters: {0}")]
    InvalidParams(String),

    #[error("invalid precision target {0}; must be positive")]
    InvalidPrecision(f64),

    #[error("invalid accumulation vector: {0}")]
    InvalidAccumulation(String),

    #[error("participant {id} is at its workload floor (n_i = B_i = {batch})")]
    AtFloor { id: String, batch: usize },

    #[error("participant {id} cannot be assigned to any cluster: {reason}")]
    Infeasible { id: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("participant {0} has no local data")]
    NoData(String),

    #[error("insufficient data: requested {requested} instances, dataset has {available}")]
    InsufficientData { requested: usize, available: usize },

    #[error("class {0} is not present in the dataset")]
    InvalidClass(usize),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

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

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Whether the error means the configured plan cannot be realised
    /// (as opposed to bad input data or a usage problem).
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Error::Infeasible { .. }
                | Error::DegeneratePopulation { .. }
                | Error::InfiniteSeparation
        )
    }

    /// Whether the error stems from missing or malformed input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Malformed { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::InsufficientData { .. }
                | Error::InvalidClass(_)
                | Error::NoData(_)
                | Error::InvalidPopulation(_)
                | Error::InvalidResource(_)
        )
    }
}
