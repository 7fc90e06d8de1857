//! Causal-LM objective, Adam, SFT formatting and the curriculum driver.

mod curriculum;
mod loss;
mod optim;
mod sft;

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::eval::EvalError;
use crate::model::ModelError;

pub use curriculum::{
    run_curriculum, run_sft, CurriculumPlan, CurriculumStep, InstructionSet, LossPoint, Phase, StepCheckpoint,
    StepCounters, TrainConfig, TrainLog,
};
pub use loss::{backward, batch_loss, clm_loss, loss_and_gradients, Batch, BatchRow, LossOutput};
pub use optim::{train_step, AdamConfig, OptimizerState, StepMetrics};
pub use sft::{format_sft_example, ChatTemplate, SftExample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("instruction example has an empty response")]
    EmptyResponse,
    #[error("response needs {needed} tokens with its template but context is {context_len}")]
    ResponseTooLong { needed: usize, context_len: usize },
    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] Box<EvalError>),
}
