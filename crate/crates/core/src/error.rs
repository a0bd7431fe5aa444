use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("dataset format error: {0}")]
    DatasetFormat(String),

    #[error("track generation failed: {0}")]
    GenerationFailed(String),

    #[error("expert lost: {0}")]
    ExpertLost(String),

    /// The remote expert missed its hold budget; the simulation must freeze.
    #[error("simulation paused: {0}")]
    Paused(String),

    #[error("undefined roc: {0}")]
    UndefinedRoc(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
