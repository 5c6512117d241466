//! Dataset handling: JSONL manifests, a deterministic synthetic-world
//! generator that doubles as the TTS stub, and the featurizing/tokenizing
//! loader that turns manifest records into model-ready task instances.

mod loader;
mod manifest;
mod synth;

pub use loader::{gold_records, load_manifest, LoaderOptions, SourceData, TaskInstance};
pub use manifest::{Manifest, ManifestRecord};
pub use synth::{
    generate_world, tts_stub, DomainSpec, GeneratedWorld, Template, TemplateItem,
    SynthWorldConfig,
};

use thiserror::Error;

use crate::audio::AudioError;
use crate::text::TextError;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("record '{id}' is missing required field '{field}'")]
    MissingField { id: String, field: &'static str },
    #[error("record '{id}' references missing file '{path}'")]
    BadReference { id: String, path: String },
    #[error("lexicon too small: {0}")]
    LexiconTooSmall(String),
    #[error("unknown word '{0}' (not in the world lexicon)")]
    UnknownWord(String),
    #[error("bad manifest line {line}: {msg}")]
    BadManifest { line: usize, msg: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
