use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("component index {index} out of range for n = {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("model is missing constant `{0}`")]
    MissingConstant(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("no power of two N satisfies {lo:.6e} <= 1/N <= {hi:.6e}")]
    NoValidGrid { lo: f64, hi: f64 },

    #[error("qubit budget exceeded: grid needs {needed} qubits, budget is {budget}")]
    QubitBudget { needed: usize, budget: usize },

    #[error("statevector norm drifted to {0}")]
    NormDrift(f64),

    #[error("chain diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
