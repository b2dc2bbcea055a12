use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("degenerate PCA fit: {0}")]
    DegenerateFit(String),

    #[error("sequence length {requested} exceeds max_seq_len {max}")]
    SequenceOverflow { requested: usize, max: usize },

    #[error("latent head is not initialized")]
    LatentHeadMissing,

    #[error("token budget {0} is invalid: budget must be a perfect square")]
    BudgetNotSquare(usize),

    #[error("malformed response: {0}")]
    Format(#[from] crate::data::FormatError),

    #[error("sampler failed on attempt {attempt}: {message}")]
    Sampler { attempt: u32, message: String },

    #[error("missing content hash: {0}")]
    MissingHash(String),

    #[error("non-finite gradient in {0}; step refused")]
    NonFiniteGradient(String),

    #[error("bad file format: {0}")]
    FileFormat(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn ensure_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
