use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are inconsistent.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A matrix required to be symmetric positive definite failed its
    /// Cholesky factorization.
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// Sigma-point rule parameters are outside their admissible range.
    #[error("invalid sigma-point rule parameter: {0}")]
    InvalidRuleParameter(String),

    /// A measurement function returned non-finite values or could not be
    /// evaluated.
    #[error("measurement function evaluation failed: {0}")]
    EvaluationFailure(String),

    /// An operation requiring an analytic jacobian was called on a
    /// function that does not provide one.
    #[error("measurement function has no analytic jacobian")]
    MissingJacobian,

    /// A corrected-Hessian system could not be solved; the correction made
    /// the information matrix singular or indefinite.
    #[error("singular system: {0}")]
    SingularSystem(String),

    /// Two algebraically equivalent routes disagreed beyond tolerance,
    /// indicating an upstream inconsistency.
    #[error("route mismatch: {0}")]
    RouteMismatch(String),

    /// The iterate step vanished; the caller must treat the iteration as
    /// converged instead of updating the correction.
    #[error("degenerate step: {0}")]
    DegenerateStep(String),

    /// Configuration values violate their invariants.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
