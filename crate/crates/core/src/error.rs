use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix of dimension {dim} is not positive definite")]
    NotPositiveDefinite { dim: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    /// The Schur complement of a partitioned update vanished: the new point
    /// numerically duplicates an existing one.
    #[error("degenerate partitioned update (v = {v:e})")]
    DegenerateUpdate { v: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("trace is empty after trimming")]
    EmptyTrace,

    #[error("full predictive covariance needs more than {needed} retained samples, have {retained}")]
    InsufficientSamples { retained: usize, needed: usize },

    #[error("sampler failed at iteration {iteration}: {source}")]
    Sampler {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("external blackbox failed: {0}")]
    ExternalFailure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn mismatch(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }
}
