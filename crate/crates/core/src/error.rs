use thiserror::Error;

/// Errors raised by the numerical kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite evaluation at x = {x:?}")]
    Evaluation { x: Vec<f64> },

    #[error("unknown system '{0}' (expected one of gradient, bernoulli, duffing, nonsymmetric)")]
    UnknownSystem(String),

    #[error("system '{0}' does not supply a potential")]
    MissingPotential(String),

    #[error("diffusion matrix is singular at node {node} (x = {x:?})")]
    SingularDiffusion { node: usize, x: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("neighborhoods of radius {radius} overlap (delta_1 = {delta1}); reduce delta")]
    OverlappingNeighborhoods { radius: f64, delta1: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
