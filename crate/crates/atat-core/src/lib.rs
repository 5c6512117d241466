//! AT-AT: a joint audio-to-text / text-to-text sequence model for spoken
//! language understanding, built end to end: log-filterbank frontend, BPE
//! tokenization with linearized intent/slot targets, a convolutional +
//! transformer encoder-decoder with hand-rolled reverse-mode gradients,
//! multi-task training with gradual unfreezing, beam decoding, and the
//! evaluation metrics (SemER, exact match, labeled-bracket P/R/F1, tree
//! validity).
//!
//! The crate also ships a deterministic synthetic world generator that
//! doubles as a TTS stub, so every experiment here runs from a single seed
//! with no external data.

pub mod audio;
pub mod corpus;
pub mod decode;
pub mod metrics;
pub mod model;
pub mod recipes;
pub mod text;
pub mod train;
pub mod util;

pub use audio::{AudioFeatureSequence, FeatureConfig, Waveform, WordAlignment};
pub use corpus::{Manifest, ManifestRecord, SynthWorldConfig, TaskInstance};
pub use decode::DecodeConfig;
pub use metrics::MetricsReport;
pub use model::{AtatModel, EncodedSequence, ModelConfig, ParamGroup, Scalar};
pub use text::{BpeModel, SemanticParse, SlotValue, TargetSequence, TaskKind};
pub use train::ScheduleConfig;
