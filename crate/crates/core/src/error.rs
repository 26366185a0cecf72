use thiserror::Error;

/// Errors raised by the calibration toolkit.
#[derive(Debug, Error)]
pub enum CalibError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: expected {expected} crank-angle samples, got {got}")]
    GridMismatch { expected: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("eigen-decomposition did not converge")]
    EigenSolve,

    #[error("Gram matrix is ill-conditioned even with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("history is empty: evaluate the initial point before querying the incumbent")]
    EmptyHistory,

    #[error("coefficient of variation undefined for non-positive mean IMEP ({0})")]
    NonPositiveMean(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = CalibError> = std::result::Result<T, E>;
