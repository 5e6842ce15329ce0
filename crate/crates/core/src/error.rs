use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("empty grid")]
    EmptyGrid,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time {0} outside the admissible range")]
    TimeOutOfRange(f64),

    #[error("singular covariance (condition number {kappa:e})")]
    Singular { kappa: f64 },

    #[error("kernel is not a delta (condition number {kappa:e}); the plain score target needs K = I")]
    NonDeltaKernel { kappa: f64 },

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("divergence at step {step}: |x| = {norm:e} exceeds {limit:e}")]
    Divergence { step: usize, norm: f64, limit: f64 },

    #[error("bad container: {0}")]
    Container(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invariant `{name}` failed: {detail}")]
    Invariant { name: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, actual })
    }
}
