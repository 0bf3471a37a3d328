use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("ensemble needs at least {required} members, got {got}")]
    InsufficientSamples { required: usize, got: usize },

    #[error("inflation factor must be >= 1, got {0}")]
    InvalidInflation(f64),

    /// Triangular factorization hit a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("matrix is not positive semi-definite (eigenvalue {eigenvalue:e} below tolerance {tolerance:e})")]
    NotPositiveSemiDefinite { eigenvalue: f64, tolerance: f64 },

    #[error("matrix is not invertible: {0}")]
    NotInvertible(String),

    /// Innovation covariance failed to factor during step `step` of a recursive update.
    #[error("innovation covariance not positive definite at step {step} (pivot {pivot})")]
    InnovationNotPd { step: usize, pivot: usize },

    #[error("innovation covariance not positive definite at step {step}, member {member}")]
    MemberInnovationNotPd { step: usize, member: usize },

    #[error("step controller stalled at pseudo-time {t:.6} after {rejections} rejections")]
    StalledController { t: f64, rejections: usize },

    #[error("line search found no descent after {halvings} halvings")]
    NoDescent { halvings: usize },

    #[error("flow operator not positive definite at lambda = {lambda}")]
    FlowFactorization { lambda: f64 },

    #[error("measurement model singular at {0}")]
    SingularPoint(String),

    #[error("invalid direction cosines: u^2 + v^2 = {0} >= 1")]
    InvalidDirectionCosines(f64),

    #[error("integration diverged at substep {substep}")]
    Divergence { substep: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid posterior underflow: unnormalized mass is zero")]
    NumericalUnderflow,
}

pub type Result<T> = std::result::Result<T, FilterError>;
