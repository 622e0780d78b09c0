use thiserror::Error;

/// Errors raised across the lab. Each variant names the contract it guards.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm {norm:e}, below the normalization floor")]
    ZeroRow { row: usize, norm: f64 },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite activation in layer {layer}, sample {sample}")]
    NonFiniteActivation { layer: usize, sample: usize },

    #[error("eigensolver did not converge within {0} iterations")]
    NoConvergence(usize),

    #[error("kernel layer/kind mismatch: {0}")]
    LayerMismatch(String),

    #[error("training diverged at t = {t}: loss {loss:e} exceeds 1e3 x initial {initial:e}")]
    DivergenceDetected { t: f64, loss: f64, initial: f64 },

    #[error("need at least {needed} probes with positive loss, got {got}")]
    InsufficientProbes { needed: usize, got: usize },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("gram matrix is singular after jitter {jitter:e} (residual {residual:e})")]
    SingularGram { jitter: f64, residual: f64 },

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("curve too short or narrow: {0}")]
    InsufficientSpan(String),

    #[error("trace does not belong to the audited state")]
    StaleTrace,

    #[error("kernel size nL = {0} exceeds the exact-assembly cap of 512")]
    KernelTooLarge(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("output directory already exists: {0}")]
    OutputCollision(String),

    #[error("malformed snapshot: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
