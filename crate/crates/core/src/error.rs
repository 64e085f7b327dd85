use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("diffusion step {t} outside [1, {max}]")]
    StepOutOfRange { t: usize, max: usize },
    #[error("target mask selects no entries")]
    EmptyTargets,
    #[error("no target entries after {0} resampling attempts")]
    ResampleExhausted(usize),
    #[error("adjacency is empty at threshold {threshold}; lower the threshold or raise the length scale")]
    EmptyGraph { threshold: f64 },
    #[error("graph: {0}")]
    Graph(String),
    #[error("mask: {0}")]
    Mask(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
