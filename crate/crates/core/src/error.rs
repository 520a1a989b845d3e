use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("point index {index} out of range for grid with {points} points")]
    PointOutOfRange { index: usize, points: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e}, tolerance {tolerance:e})")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular innovation system (condition estimate {condition:e})")]
    SingularInnovation { condition: f64 },

    #[error("dry cell at (i={i}, j={j}): depth {depth}")]
    DryState { i: usize, j: usize, depth: f64 },

    #[error("CFL condition violated: Courant number {courant:.4} > 1")]
    CflViolation { courant: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("drifter {drifter} has non-finite position")]
    DrifterPosition { drifter: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
