//! Audio frontend: WAV decoding, log-filterbank feature extraction, and
//! word-aligned waveform masking for the masked-audio LM task.

mod lfb;
mod mask;
mod wav;

pub use lfb::{compute_lfb, mel_filterbank, mel_from_hz, AudioFeatureSequence, FeatureConfig};
pub use mask::mask_audio;
pub use wav::{load_wav, write_wav};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical sample rate. Resampling is out of scope; anything else is
/// rejected by the feature pipeline.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

/// Mono PCM-16 audio.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Waveform {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<i16>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::UnsupportedFormat("sample rate 0".into()));
        }
        if samples.is_empty() {
            return Err(AudioError::UnsupportedFormat("empty waveform".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }
}

/// One aligned word: `[start_ms, end_ms)` measured from the waveform start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedWord {
    pub word: String,
    pub start_ms: f64,
    pub end_ms: f64,
}

/// Word-level time alignment for a transcript. Entries are non-overlapping
/// and monotonically increasing, in transcript order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAlignment {
    pub entries: Vec<AlignedWord>,
}

impl WordAlignment {
    pub fn new(entries: Vec<AlignedWord>) -> Result<Self, AudioError> {
        let mut prev_end = f64::NEG_INFINITY;
        for e in &entries {
            if e.end_ms <= e.start_ms {
                return Err(AudioError::BadAlignment(format!(
                    "word '{}' has end {} <= start {}",
                    e.word, e.end_ms, e.start_ms
                )));
            }
            if e.start_ms < prev_end {
                return Err(AudioError::BadAlignment(format!(
                    "word '{}' overlaps previous entry",
                    e.word
                )));
            }
            prev_end = e.end_ms;
        }
        Ok(Self { entries })
    }

    /// Parse the alignment JSON interchange: an array of
    /// `{word, start_ms, end_ms}` objects. Unknown fields are ignored.
    pub fn from_json(s: &str) -> Result<Self, AudioError> {
        let entries: Vec<AlignedWord> =
            serde_json::from_str(s).map_err(|e| AudioError::BadAlignment(e.to_string()))?;
        Self::new(entries)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.entries).expect("alignment serializes")
    }
}

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed wav: {0}")]
    MalformedWav(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("signal shorter than one analysis window ({signal} < {window} samples)")]
    TooShort { signal: usize, window: usize },
    #[error("alignment out of range: {0}")]
    AlignmentOutOfRange(String),
    #[error("bad alignment: {0}")]
    BadAlignment(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
