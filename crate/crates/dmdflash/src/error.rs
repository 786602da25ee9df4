//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("backward pass requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss tensor was created outside the active tape")]
    OffTapeLoss,

    #[error("timestep {t} out of range [0, {max})")]
    TimestepRange { t: usize, max: usize },

    #[error("timestep {0} is singular (sigma = 0)")]
    SingularTimestep(usize),

    #[error("timestep {t} violates loss routing: {rule}")]
    Routing { t: usize, rule: String },

    #[error("timestep {0} not in the sampling grid")]
    NotInGrid(usize),

    #[error("invalid hop: t_to {t_to} must be below t_from {t_from}")]
    BadHop { t_from: usize, t_to: usize },

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("unknown condition id {0}")]
    UnknownCondition(usize),

    #[error("preference group needs at least 2 candidates, got {0}")]
    GroupTooSmall(usize),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("training aborted at iteration {iteration}: non-finite {loss_name} loss")]
    NanAbort { iteration: u64, loss_name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
