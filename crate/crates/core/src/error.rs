use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("time {t} outside valid domain [{lo}, {hi}]")]
    TimeOutOfDomain { t: f64, lo: f64, hi: f64 },
    #[error("invalid schedule parameters: {0}")]
    InvalidSchedule(String),
    #[error("timestep grid must have at least one step")]
    EmptyGrid,
    #[error("unknown class label `{0}`")]
    UnknownLabel(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid mixture spec: {0}")]
    InvalidMixture(String),
    #[error("invalid strategy parameters: {0}")]
    InvalidStrategy(String),
    #[error("cosine similarity undefined for zero-norm input")]
    ZeroNormSimilarity,
    #[error("similarity strategy needs a measured gamma before step {0}")]
    MissingGamma(usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("degenerate sample covariance")]
    DegenerateCovariance,
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("cost report requires traces with matching step counts")]
    MixedStepCounts,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;
