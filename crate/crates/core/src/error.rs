use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("Hessian of the penalty at the origin is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NonPsdHessian { min_eigenvalue: f64 },

    #[error("unknown example system `{0}`")]
    UnknownExample(String),

    #[error("input gain is singular at the queried point")]
    SingularG,

    #[error("state partition ({n1}, {n2}) does not match state dimension {n}")]
    BadPartition { n1: usize, n2: usize, n: usize },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("(A, B) is not stabilizable")]
    NotStabilizable,

    #[error("(C, A) is not detectable")]
    NotDetectable,

    #[error("invariant subspace basis is ill-conditioned (condition number {cond:e})")]
    IllConditionedSubspace { cond: f64 },

    #[error("matrix is not Hurwitz (max real part {max_real:e})")]
    NotHurwitz { max_real: f64 },

    #[error("Lyapunov solution is not negative semidefinite (max eigenvalue {max_eigenvalue:e})")]
    NotNegativeSemidefinite { max_eigenvalue: f64 },

    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },

    #[error("state norm exceeded the escape bound at t = {t}")]
    FiniteEscape { t: f64 },

    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("integrator exceeded {0} steps")]
    TooManySteps(usize),

    #[error("iteration did not converge: {0}")]
    NoConvergence(String),

    #[error("query point is not covered by the manifold chart")]
    Uncovered,

    #[error("shooting diverged (best residual {residual:e})")]
    ShootingDiverged { residual: f64, p0: Vec<f64> },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("expression error: {0}")]
    Expression(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for failures of the ODE layer (escape, underflow, NaN).
    pub fn is_integrator_failure(&self) -> bool {
        matches!(
            self,
            Error::StepSizeUnderflow { .. }
                | Error::FiniteEscape { .. }
                | Error::NonFiniteState { .. }
                | Error::TooManySteps(_)
        )
    }
}
