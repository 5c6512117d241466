//! JSONL manifests: one record per line with per-task field requirements.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::text::{SemanticParse, TaskKind};

use super::CorpusError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parse: Option<SemanticParse>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_path: Option<String>,
    pub domain: String,
}

impl ManifestRecord {
    /// Check the per-task required fields: SLU needs audio+parse, ASR
    /// audio+transcript, MLM audio+transcript+alignment, NLU
    /// transcript+parse.
    pub fn validate(&self) -> Result<TaskKind, CorpusError> {
        let task = TaskKind::parse(&self.task)
            .map_err(|_| CorpusError::MissingField { id: self.id.clone(), field: "task" })?;
        let need = |cond: bool, field: &'static str| {
            if cond {
                Ok(())
            } else {
                Err(CorpusError::MissingField { id: self.id.clone(), field })
            }
        };
        match task {
            TaskKind::Slu => {
                need(self.audio_path.is_some(), "audio_path")?;
                need(self.parse.is_some(), "parse")?;
            }
            TaskKind::Asr => {
                need(self.audio_path.is_some(), "audio_path")?;
                need(self.transcript.is_some(), "transcript")?;
            }
            TaskKind::Mlm => {
                need(self.audio_path.is_some(), "audio_path")?;
                need(self.transcript.is_some(), "transcript")?;
                need(self.alignment_path.is_some(), "alignment_path")?;
            }
            TaskKind::Nlu => {
                need(self.transcript.is_some(), "transcript")?;
                need(self.parse.is_some(), "parse")?;
            }
            TaskKind::Custom(_) => {
                need(self.audio_path.is_some(), "audio_path")?;
            }
        }
        Ok(task)
    }
}

/// A loaded manifest plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path)?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| CorpusError::BadManifest { line: i + 1, msg: e.to_string() })?;
            records.push(rec);
        }
        Ok(Self { records, dir })
    }

    pub fn save(records: &[ManifestRecord], path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_catches_missing_fields() {
        let rec = ManifestRecord {
            id: "u1".into(),
            task: "slu".into(),
            audio_path: Some("a.wav".into()),
            transcript: None,
            parse: None,
            alignment_path: None,
            domain: "music".into(),
        };
        match rec.validate() {
            Err(CorpusError::MissingField { id, field }) => {
                assert_eq!(id, "u1");
                assert_eq!(field, "parse");
            }
            other => panic!("expected MissingField, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let recs = vec![ManifestRecord {
            id: "u1".into(),
            task: "nlu".into(),
            audio_path: None,
            transcript: Some("play the song".into()),
            parse: Some(crate::text::SemanticParse::new("PLAY_SONG")),
            alignment_path: None,
            domain: "music".into(),
        }];
        Manifest::save(&recs, &p).unwrap();
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.records, recs);
    }
}
