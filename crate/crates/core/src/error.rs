use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("non-finite entry in {what} at grid index {index}")]
    NonFinite { what: String, index: usize },

    #[error("malformed model: {0}")]
    Malformed(String),

    #[error("singular control Hessian {which} at grid index {index}: smallest eigenvalue {min_eig:e}")]
    SingularSigma {
        which: &'static str,
        index: usize,
        min_eig: f64,
    },

    #[error("Riccati solution escaped (|entry| > 1e12) in {which} at grid index {index}")]
    BlowUp { which: &'static str, index: usize },

    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("ensemble was simulated without full path recording")]
    PathsNotRecorded,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scenario tree too large: {0}")]
    TreeTooLarge(String),

    #[error("jump probability nu*h = {value} >= 1 for atom {atom}")]
    JumpProbability { atom: usize, value: f64 },

    #[error("oracle Hessian is not positive definite")]
    SingularHessian,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
