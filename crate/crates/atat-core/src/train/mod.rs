//! Multi-task training: noam learning-rate schedule, Adam with per-group
//! freeze multipliers, weighted task-mixed batch sampling, and the three
//! workflows (pretrain, finetune, zero-shot finetune).

mod adam;
mod sampler;
mod schedule;
mod trainer;

pub use adam::AdamState;
pub use sampler::{sample_batch, TaskDataset};
pub use schedule::{noam_lr, ScheduleConfig};
pub use trainer::{
    finetune, pretrain, zeroshot_finetune, LossLogEntry, TrainArtifacts, TrainOptions,
};

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged (non-finite) at step {step}")]
    DivergedLoss { step: u64 },
    #[error("empty task mixture: no sampleable dataset")]
    EmptyMixture,
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint lacks a trained text path (pretraining must include a text-to-text task)")]
    MissingTextEncoder,
    #[error("checkpoint lacks a trained audio path (pretraining must include an audio-to-text task)")]
    MissingAudioEncoder,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
