use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation on the tape produced NaN or an infinity.
    #[error("non-finite result in `{op}` (inputs: {inputs})")]
    NumericDomain { op: &'static str, inputs: String },

    /// A numerical precondition failed outside the tape (e.g. a Cholesky factorization).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The caller violated a documented precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A chain left the finite domain at the given leapfrog step (1-based, 0 = initialization).
    #[error("divergence at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::NumericDomain { .. })
    }
}
