use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("singular matrix: rank {rank} of {dim}")]
    Singular { rank: usize, dim: usize },

    #[error("dense size {size} exceeds limit {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("retraction failed to converge, residual {residual:e}")]
    Retraction { residual: f64 },

    #[error("newton iteration failed, residual {residual:e}")]
    Newton { residual: f64 },

    #[error("all localisation weights vanish; try kappa >= {suggested:.3}")]
    NoSupport { suggested: f64 },

    #[error("frequency bin {bin} contains no DFT frequency")]
    EmptyBin { bin: usize },

    #[error("optimisation failed: {0}")]
    Optimisation(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
