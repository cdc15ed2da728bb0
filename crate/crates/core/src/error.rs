use thiserror::Error;

/// Errors produced by model construction, inference, learning and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied data is malformed (non-finite values, wrong shape).
    #[error("invalid input: {0}")]
    Input(String),

    /// A parameter set violates a model invariant.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Σ_k failed its Cholesky factorization.
    #[error("covariance of state {state} is not symmetric positive definite")]
    NotPositiveDefinite { state: usize },

    /// A numeric failure located at a particular timestep.
    #[error("numeric failure at t={t}: {source}")]
    AtTimestep {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    /// Dimensions of two collaborating objects disagree.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("instance too large for brute-force enumeration: {paths} paths (limit {limit})")]
    TooLarge { paths: f64, limit: f64 },

    #[error("initialization failed: {0}")]
    Init(String),

    #[error("objective became non-finite at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn at(self, t: usize) -> Self {
        Error::AtTimestep {
            t,
            source: Box::new(self),
        }
    }
}
