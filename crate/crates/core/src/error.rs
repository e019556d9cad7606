use thiserror::Error;

/// Errors produced by the pipeline.
///
/// The CLI maps these onto exit codes: model errors exit 3, solver
/// non-convergence exits 4, everything else is an input error (exit 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image format error: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Alignment(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("region index {index} out of range ({count} regions)")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model file error: {0}")]
    Model(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
