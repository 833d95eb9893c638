use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("newton-schulz did not converge after {iterations} iterations (residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("projection failed at frequency ({u}, {v}): {source}")]
    SliceConvergence {
        u: usize,
        v: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error at byte {offset}: {message}")]
    Input { offset: usize, message: String },

    #[error("bound not applicable: {0}")]
    Applicability(String),

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("training diverged for L = {depth}: loss {loss:.3e} exceeds 10x initial {initial:.3e}")]
    Divergence { depth: usize, loss: f64, initial: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
