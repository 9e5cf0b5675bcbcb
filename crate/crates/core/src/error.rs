use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("bodies {i} and {j} are coincident (distance {distance:e})")]
    CoincidentBodies { i: usize, j: usize, distance: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite state encountered at step {step}")]
    NonFiniteState { step: usize },

    #[error("step size underflow at t = {t} (dt = {dt:e})")]
    StepSizeUnderflow { t: f64, dt: f64 },

    #[error("trajectory diverged at step {step}")]
    Diverged { step: usize },

    #[error("line search failed after {halvings} halvings")]
    LineSearchFailed { halvings: usize },

    #[error("training prefix has {points} points, need at least 2")]
    EmptyTrain { points: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Process exit code used by the command-line tool: 2 configuration,
    /// 3 integration, 4 divergence, 5 mismatch, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::EmptyTrain { .. } => 2,
            Error::CoincidentBodies { .. } | Error::NonFiniteState { .. } | Error::StepSizeUnderflow { .. } => 3,
            Error::Diverged { .. } | Error::LineSearchFailed { .. } => 4,
            Error::CheckpointMismatch(_) | Error::GridMismatch(_) | Error::DimensionMismatch { .. } => 5,
            Error::Io(_) => 1,
        }
    }
}
