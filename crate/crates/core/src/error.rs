use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid MDP: {}", .0.join("; "))]
    InvalidMdp(Vec<String>),

    #[error("index {index} out of range for {bound} states")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("policy enumeration needs {policies} evaluations (limit 1e6); run policy iteration to stabilization instead")]
    OracleTooLarge { policies: f64 },

    #[error("{0} does not support gamma = 1")]
    UndiscountedUnsupported(&'static str),

    #[error("Newton-form identity of policy iteration violated by {gap:e}")]
    NewtonIdentity { gap: f64 },

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("optimizer rule {0} needs a Hessian oracle")]
    MissingHessian(&'static str),

    #[error("oracle has no noisy gradient")]
    MissingNoisyOracle,

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown experiment id {0}")]
    UnknownExperiment(String),

    #[error("unknown {kind} {name:?}")]
    UnknownName { kind: &'static str, name: String },

    #[error("backtracking exceeded its bound of {bound} evaluations")]
    BacktrackLimit { bound: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
