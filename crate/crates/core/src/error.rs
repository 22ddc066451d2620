use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("matrix is not positive semidefinite (failed at pivot {pivot}, jitter {jitter:e})")]
    NotPsd { pivot: usize, jitter: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("infeasible input: {0}")]
    InfeasibleInput(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("singular matrix: {0}")]
    SingularMatrix(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("grid error: {0}")]
    Grid(String),
    #[error("too many extreme points: {count} after pruning (cap {cap})")]
    TooManyExtremePoints { count: usize, cap: usize },
    #[error("divergent integral: {0}")]
    Divergent(String),
    #[error("drift too small: {0}")]
    DriftTooSmall(String),
    #[error("root not bracketed: {0}")]
    RootNotBracketed(String),
    #[error("missing constant: {0}")]
    MissingConstant(String),
    #[error("unsupported dimension: {0}")]
    DimensionUnsupported(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

impl Error {
    /// Process exit code: 2 for rejected input, 3 for numerical trouble.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotPsd { .. }
            | Error::NumericalFailure(_)
            | Error::SingularMatrix(_)
            | Error::Divergent(_)
            | Error::RootNotBracketed(_)
            | Error::TooManyExtremePoints { .. }
            | Error::AssumptionViolation(_)
            | Error::Evaluation(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
