use thiserror::Error;

/// Errors raised by the estimator, the simulator and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("covariance is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("{0} clone window is full; marginalize before augmenting")]
    WindowFull(&'static str),

    #[error("{0} clone window is empty")]
    EmptyWindow(&'static str),

    #[error("clone {0} is no longer in the window")]
    StaleClone(u64),

    #[error("innovation covariance is not invertible")]
    SingularInnovation,

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("insufficient window: {have} ranges, need at least {need}")]
    InsufficientWindow { have: usize, need: usize },

    #[error("non-positive range scale factor {0}")]
    InvalidScale(f64),

    #[error("unknown anchor id {0}")]
    UnknownAnchor(u32),

    #[error("trajectories have no temporal overlap")]
    NoOverlap,

    #[error("invalid configuration at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
