use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario tree: {0}")]
    InvalidTree(String),
    #[error("unknown node id {0}")]
    UnknownNode(i64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("singular pivot at level {level} (condition estimate {cond:.3e})")]
    SingularPivot { level: usize, cond: f64 },
    #[error("relative residual {residual:.3e} exceeds {limit:.1e}")]
    ResidualTooLarge { residual: f64, limit: f64 },
    #[error("matrix is not symmetric positive definite (min eigenvalue {min_eig:.3e})")]
    NotSpd { min_eig: f64 },
    #[error("active-set iteration limit {0} exceeded")]
    MaxPivotsExceeded(usize),
    #[error("feasible set is empty")]
    Infeasible,
    #[error("deterministic feasible set is empty")]
    InfeasibleDeterministic,
    #[error("dense dimension {dim} exceeds cap {cap}")]
    DimensionOverflow { dim: usize, cap: usize },
    #[error("singular dense system")]
    SingularSystem,
    #[error("optimality conditions not met (residual {residual:.3e})")]
    NotConverged { residual: f64 },
    #[error("hypothesis check failed: {0}")]
    Hypothesis(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Infeasible,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidTree(_)
            | Error::UnknownNode(_)
            | Error::Shape(_)
            | Error::OutOfRange(_)
            | Error::Input(_)
            | Error::Hypothesis(_)
            | Error::DimensionOverflow { .. }
            | Error::Json(_)
            | Error::Io(_) => ErrorClass::Input,
            Error::Infeasible | Error::InfeasibleDeterministic => ErrorClass::Infeasible,
            Error::SingularPivot { .. }
            | Error::ResidualTooLarge { .. }
            | Error::NotSpd { .. }
            | Error::MaxPivotsExceeded(_)
            | Error::SingularSystem
            | Error::NotConverged { .. } => ErrorClass::Numerical,
        }
    }
}
