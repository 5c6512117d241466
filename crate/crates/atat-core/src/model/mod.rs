//! The AT-AT network: a convolutional + transformer audio encoder, a
//! transformer text encoder with a projection down to the shared width, and
//! a single shared transformer decoder whose generator is tied to the target
//! embedding matrix. Forward loss and reverse-mode gradients are implemented
//! by hand over ndarray; everything is generic over f32/f64 so training runs
//! single precision while gradient checks run double.

mod checkpoint;
mod config;
mod freeze;
mod layers;
mod net;
mod store;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::ModelConfig;
pub use freeze::unfreeze_multiplier;
pub use net::{AtatModel, InstancePass, InstanceSource};
pub use store::{GradStore, Init, ParamGroup, ParamStore, StoreBuilder, TensorId, TensorMeta};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::Float;
use thiserror::Error;

/// Element type for all model math. f64 for gradient-check builds, f32 for
/// training runs.
pub trait Scalar:
    Float + ScalarOperand + LinalgScalar + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Where a sequence of encoder states came from. The decoder never reads
/// this; it exists for bookkeeping and task validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Audio,
    Text,
}

/// Encoder output consumed by the shared decoder, identical in shape for
/// audio and text sources.
#[derive(Debug, Clone)]
pub struct EncodedSequence<F: Scalar> {
    /// `T' x d_model`.
    pub states: Array2<F>,
    pub source_kind: SourceKind,
    /// Key padding mask; `false` positions are hidden from cross-attention.
    pub mask: Vec<bool>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds max positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("bad target: {0}")]
    BadTarget(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
