use thiserror::Error;

/// Errors raised by the simulation, training and tomography routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("aperture too small: {clipped:.3e} of the mode energy falls outside the grid")]
    ApertureTooSmall { clipped: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown gate `{0}`")]
    UnknownGate(String),

    #[error("matrix is not unitary (max deviation {0:.3e})")]
    NotUnitary(f64),

    #[error("zero input power")]
    ZeroInput,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
