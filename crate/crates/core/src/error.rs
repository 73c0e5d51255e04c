use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("unsupported kernel size {0}x{1}; only 3x3 is implemented")]
    UnsupportedKernel(usize, usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("patch side {n} does not fit in a {height}x{width} cube")]
    EmptyTiling { n: usize, height: usize, width: usize },

    #[error("block assembly failed: {0}")]
    Assembly(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("rank deficiency at OMP step {step}: selected Gram submatrix is singular")]
    Rank { step: usize },

    #[error("solver context is stale: factorized for b = {factored}, parameters give b = {current}")]
    StaleContext { factored: f64, current: f64 },

    #[error("restricted Gram matrix is singular beyond the ridge tolerance (pivot {pivot})")]
    Conditioning { pivot: usize },

    #[error("fixed-point iteration diverged at iteration {iteration} (non-finite iterate)")]
    Divergence { iteration: usize },

    #[error(
        "adjoint fixed point diverged at iteration {iteration}; \
         try a smaller damping beta or a larger ridge"
    )]
    AdjointDivergence { iteration: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("SSIM window of {window} exceeds spatial size {height}x{width}")]
    Window {
        window: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
