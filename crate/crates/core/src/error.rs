use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum PlzipError {
    #[error("{what} is outside its domain: {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("kernel weights degenerate at tau = {tau}")]
    DegenerateWindow { tau: f64 },

    #[error("local fit failed at tau = {tau}: {reason}")]
    LocalFit { tau: f64, reason: String },

    #[error("logistic step separated along direction {direction:?}")]
    Separation { direction: Vec<f64> },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("bandwidth selection failed: no candidate produced a converged fit")]
    SelectionFailure,

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("line {line}: {message}")]
    Input { line: usize, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PlzipError>;
