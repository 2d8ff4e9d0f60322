use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("point lies on the cut locus of the projection")]
    CutLocus,

    #[error("point is off the manifold by {0:e}")]
    OffManifold(f64),

    #[error("normal offset violates the log-det domain (eigenvalue {0})")]
    LogDetDomain(f64),

    #[error("time {t} outside [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("noise variance h(t) is zero")]
    ZeroNoise,

    #[error("noise level h = {h} violates the phase gate (threshold {threshold})")]
    PhaseViolation { h: f64, threshold: f64 },

    #[error("quadrature did not converge (relative change {0:e})")]
    NonConvergence(f64),

    #[error("training diverged at step {step}: loss {loss:e} vs initial {initial:e}")]
    Divergence { step: usize, loss: f64, initial: f64 },

    #[error("non-finite state at sampler step {0}")]
    NonFinite(usize),

    #[error("size cap exceeded: {n} > {cap}")]
    SizeCap { n: usize, cap: usize },

    #[error("rate fit failed: {0}")]
    RateFit(String),
}

pub type Result<T> = std::result::Result<T, Error>;
