use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("state left the noise window [{a_min}, {a_max}] at step {step} (value {value})")]
    WindowExceeded {
        step: usize,
        value: f64,
        a_min: f64,
        a_max: f64,
    },
    #[error("solution blew up at step {step}")]
    BlowUp { step: usize },
    #[error("singular tridiagonal system at row {0}")]
    Singular(usize),
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
