use thiserror::Error;

use crate::ssm::SsmError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error("non-finite loss at step {step} (lr {lr}): cls {cls}, l1 {l1}, giou {giou}")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        cls: f64,
        l1: f64,
        giou: f64,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
