use thiserror::Error;

/// Errors raised across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {site}: expected {expected:?}, got {got:?}")]
    Shape {
        site: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss must be scalar-shaped, got {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid class label {label} (classes: {classes})")]
    InvalidLabel { label: usize, classes: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("malformed raster: {0}")]
    Raster(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        /// Parameters after the last finite update.
        last_good: Box<crate::nn::Network>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
