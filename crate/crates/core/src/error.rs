use thiserror::Error;

pub type Result<T> = std::result::Result<T, KvnError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvnError {
    /// A grid axis or grid-level parameter failed validation.
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("index {index} out of range for {len} grid states")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("axis {axis} out of range for a {dim}-dimensional grid")]
    InvalidAxis { axis: usize, dim: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unknown builtin system `{0}`")]
    UnknownSystem(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A characteristic left the finite numbers; `time` is the first
    /// time at which a non-finite state was observed.
    #[error("non-finite state along characteristic at t = {time}")]
    BlowUp { time: f64 },

    #[error("operation requires a canonical Hamiltonian system")]
    NotCanonical,

    #[error("expression error at position {position}: {message}")]
    Expression { position: usize, message: String },

    #[error("unsupported scheme: {0}")]
    UnsupportedScheme(String),

    #[error("state space too large for dense treatment: {n} > {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("linear solve did not converge after {iterations} iterations (residual {residual:e})")]
    SolverDivergence { iterations: usize, residual: f64 },

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),

    /// Jacobian series touches or lingers at zero; the caustic is not simple.
    #[error("degenerate caustic near t = {time}: zero of the monitored Jacobian is not simple")]
    DegenerateCaustic { time: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("observable error: {0}")]
    Observable(String),

    #[error("unresolvable state: {0}")]
    Unresolvable(String),
}
