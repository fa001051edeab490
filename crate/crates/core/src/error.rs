use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Subsystem indices in messages are 1-based; step indices are the time `k`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {field}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        field: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{matrix} fails the definiteness test: eigenvalue {eigenvalue:e}")]
    DefinitenessViolation { matrix: String, eigenvalue: f64 },
    #[error("{matrix} is not symmetric (relative asymmetry {asymmetry:e})")]
    Asymmetric { matrix: String, asymmetry: f64 },
    #[error("success probability of subsystem {subsystem} is {value}, outside [0, 1]")]
    ProbabilityOutOfRange { subsystem: usize, value: f64 },
    #[error("multiplicative noise variance of subsystem {subsystem} is {value}, must be >= 0")]
    NegativeVariance { subsystem: usize, value: f64 },
    #[error("{field} contains a non-finite value")]
    NonFinite { field: String },
    #[error("model has no subsystems")]
    Empty,
    #[error("Lambda is singular at k = {k} (rcond {rcond:e})")]
    SingularLambda { k: usize, rcond: f64 },
    #[error("LambdaTilde is singular at k = {k} (rcond {rcond:e})")]
    SingularLambdaTilde { k: usize, rcond: f64 },
    #[error("{which} of subsystem {subsystem} is singular at k = {k} (rcond {rcond:e})")]
    SingularPi {
        k: usize,
        subsystem: usize,
        which: &'static str,
        rcond: f64,
    },
    #[error("additive recursion requested but subsystem {subsystem} has sigma_w = {sigma_w}")]
    NotAdditive { subsystem: usize, sigma_w: f64 },
    #[error("single-subsystem recursion requested for a model with {subsystems} subsystems")]
    NotSingle { subsystems: usize },
    #[error("horizon mismatch: model needs {expected} steps, found {found}")]
    HorizonMismatch { expected: usize, found: usize },
    #[error("solver consistency: {what} (relative asymmetry {asymmetry:e})")]
    SolverConsistency { what: String, asymmetry: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors meaning the control problem has no unique solution,
    /// as opposed to malformed input.
    pub fn is_solvability(&self) -> bool {
        matches!(
            self,
            Error::SingularLambda { .. }
                | Error::SingularLambdaTilde { .. }
                | Error::SingularPi { .. }
                | Error::SolverConsistency { .. }
        )
    }
}
