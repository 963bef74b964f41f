use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("invalid split spec: {0}")]
    SplitSpec(String),

    #[error("label {0:?} has too few documents: need {1}, found {2}")]
    InsufficientLabel(String, usize, usize),

    #[error("label inventories differ; only in first: {only_left:?}, only in second: {only_right:?}")]
    LabelMismatch {
        only_left: Vec<String>,
        only_right: Vec<String>,
    },

    #[error("split invariant violated: {0}")]
    SplitInvariant(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("class index {0} out of range for {1} classes")]
    ClassOutOfRange(usize, usize),

    #[error("non-finite gradient encountered at parameter {0}; training aborted")]
    NonFiniteGradient(usize),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("no examples for class {0} in the fitting set")]
    EmptyClass(usize),

    #[error("covariance factorization failed even after regularization (pivot {0})")]
    NotPositiveDefinite(usize),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

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

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
