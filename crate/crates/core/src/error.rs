use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("natural parameter outside the model domain: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("response {0} outside the support of the model")]
    Support(f64),
    #[error("logistic loss is unbounded below (separated data) after {iterations} iterations")]
    Separation { iterations: usize },
    #[error("weighted design is singular (condition number {condition:e})")]
    SingularDesign { condition: f64 },
    #[error("weighted residual variance {0:e} is below the degeneracy threshold")]
    DegenerateVariance(f64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("matrix is singular (minimum eigenvalue {0:e})")]
    Singular(f64),
    #[error("covariance is not positive semidefinite (minimum eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("observed block of the conditioning is singular")]
    SingularCondition,
    #[error("no closed form for scheme `{0}`")]
    UnsupportedScheme(&'static str),
    #[error("degenerate quantity: {0}")]
    Degenerate(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
