//! Text frontend: BPE tokenization of target text and conversion between
//! semantic parses and linearized bracket sequences, with task-label BOS
//! tokens.

mod bpe;
mod parse;

pub use bpe::{BpeModel, EOS_ID, PAD_ID, SP_ID, UNK_ID};
pub use parse::{
    delinearize, delinearize_outcome, linearize, ParseOutcome, ParsedHypothesis, SemanticParse,
    SlotChild, SlotValue,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The task a (source, target) pair belongs to. Each task owns one reserved
/// BOS token; the decoder conditions on it to pick what to generate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    /// Speech to hypothesis.
    Slu,
    /// Speech to transcript.
    Asr,
    /// Masked speech to full transcript.
    Mlm,
    /// Transcript text to hypothesis.
    Nlu,
    /// Corpus-defined extension task (audio or text source, stated at use).
    Custom(String),
}

impl TaskKind {
    pub fn bos_token(&self) -> String {
        match self {
            TaskKind::Slu => "<slu>".into(),
            TaskKind::Asr => "<asr>".into(),
            TaskKind::Mlm => "<mlm>".into(),
            TaskKind::Nlu => "<nlu>".into(),
            TaskKind::Custom(name) => format!("<task:{name}>"),
        }
    }

    pub fn parse(s: &str) -> Result<Self, TextError> {
        match s {
            "slu" => Ok(TaskKind::Slu),
            "asr" => Ok(TaskKind::Asr),
            "mlm" => Ok(TaskKind::Mlm),
            "nlu" => Ok(TaskKind::Nlu),
            other => {
                if !other.is_empty()
                    && other.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
                {
                    Ok(TaskKind::Custom(other.to_string()))
                } else {
                    Err(TextError::BadToken(format!("bad task name '{other}'")))
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            TaskKind::Slu => "slu".into(),
            TaskKind::Asr => "asr".into(),
            TaskKind::Mlm => "mlm".into(),
            TaskKind::Nlu => "nlu".into(),
            TaskKind::Custom(name) => name.clone(),
        }
    }

    /// Whether instances of this task read audio on the source side.
    /// Extension tasks default to audio.
    pub fn is_audio_source(&self) -> bool {
        !matches!(self, TaskKind::Nlu)
    }
}

/// A decoder-side token sequence: a task BOS, the payload, then EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSequence {
    pub task: TaskKind,
    /// Includes the leading task BOS and the trailing EOS.
    pub tokens: Vec<u32>,
}

impl TargetSequence {
    /// Payload ids without BOS and EOS.
    pub fn payload(&self) -> &[u32] {
        &self.tokens[1..self.tokens.len() - 1]
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("vocab size {requested} too small: need at least {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("slot value out of order: {0}")]
    SpanOutOfOrder(String),
    #[error("invalid tree at atom {position}: {reason}")]
    TreeInvalid { position: usize, reason: String },
    #[error("bad token: {0}")]
    BadToken(String),
    #[error("bad tokenizer file: {0}")]
    BadTokenizerFile(String),
}
