use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("model has no GOP value function v*")]
    MissingValueFunction,

    #[error("operation requires a one-factor model (n = 1), got n = {0}")]
    NotOneFactor(usize),

    #[error("point {point:?} at t = {t} lies outside the admissible region: {reason}")]
    OutOfDomain { t: f64, point: Vec<f64>, reason: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("singular tridiagonal system at row {row}")]
    SingularSystem { row: usize },

    #[error("matrix is rank deficient (smallest singular value {0:e})")]
    RankDeficient(f64),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("{0}")]
    Inconsistent(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

/// Rejects NaN and infinities for a named scalar input.
pub(crate) fn ensure_finite(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be finite, got {value}")))
    }
}
