use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input: mismatched dimensions, out-of-range parameters,
    /// malformed kernels.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical analysis cannot proceed (reducible chain, singular
    /// matrix, ...).
    #[error("analysis error: {0}")]
    Analysis(String),

    /// An iterative solver hit its iteration cap before reaching tolerance.
    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NonConvergence { iterations: usize, last_change: f64 },

    /// Floating-point breakdown (non-positive density, non-finite loss).
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn analysis(msg: impl Into<String>) -> Self {
        Error::Analysis(msg.into())
    }
}
