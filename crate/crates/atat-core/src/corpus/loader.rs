//! Turn manifest records into model-ready task instances: load audio,
//! extract features, apply MLM masking, tokenize targets.

use ndarray::Array2;

use crate::audio::{compute_lfb, load_wav, mask_audio, AudioFeatureSequence, FeatureConfig, WordAlignment};
use crate::metrics::GoldRecord;
use crate::text::{linearize, BpeModel, TargetSequence, TaskKind};
use crate::util::derive_seed;

use super::{CorpusError, Manifest};

/// Source side of a task instance.
#[derive(Debug, Clone)]
pub enum SourceData {
    Audio(AudioFeatureSequence),
    Text(Vec<u32>),
}

/// One (task, source, target) triple ready for the model.
#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub id: String,
    pub domain: String,
    pub task: TaskKind,
    pub source: SourceData,
    pub target: TargetSequence,
}

#[derive(Debug, Clone)]
pub struct LoaderOptions {
    pub features: FeatureConfig,
    /// Fraction of words masked for MLM records.
    pub mlm_fraction: f64,
    /// Seed for the per-record masking choices.
    pub seed: u64,
}

impl Default for LoaderOptions {
    fn default() -> Self {
        Self { features: FeatureConfig::default(), mlm_fraction: 0.15, seed: 0 }
    }
}

fn transcript_words(rec_transcript: Option<&String>) -> Vec<String> {
    rec_transcript
        .map(|t| t.split_whitespace().map(str::to_string).collect())
        .unwrap_or_default()
}

/// Linearization atoms for a record's parse. When the transcript is absent
/// (spec minimum for SLU is audio+parse), the slot yields stand in for it,
/// producing a carrier-less target.
fn parse_atoms(
    parse: &crate::text::SemanticParse,
    transcript: Option<&String>,
) -> Result<Vec<String>, CorpusError> {
    let words = match transcript {
        Some(t) => t.split_whitespace().map(str::to_string).collect(),
        None => parse.leaf_words(),
    };
    Ok(linearize(parse, &words)?)
}

/// Load every record of a manifest, featurized and tokenized, in stable id
/// order.
pub fn load_manifest(
    manifest: &Manifest,
    bpe: &BpeModel,
    opts: &LoaderOptions,
) -> Result<Vec<TaskInstance>, CorpusError> {
    let mut records = manifest.records.clone();
    records.sort_by(|a, b| a.id.cmp(&b.id));

    let mut out = Vec::with_capacity(records.len());
    for rec in &records {
        let task = rec.validate()?;
        let load_audio = |rel: &str| {
            let path = manifest.resolve(rel);
            load_wav(&path).map_err(|_| CorpusError::BadReference {
                id: rec.id.clone(),
                path: path.display().to_string(),
            })
        };

        let (source, target) = match task {
            TaskKind::Slu => {
                let wav = load_audio(rec.audio_path.as_ref().unwrap())?;
                let feats = compute_lfb(&wav, &opts.features)?;
                let atoms = parse_atoms(rec.parse.as_ref().unwrap(), rec.transcript.as_ref())?;
                (SourceData::Audio(feats), bpe.encode_target(&task, &atoms)?)
            }
            TaskKind::Asr => {
                let wav = load_audio(rec.audio_path.as_ref().unwrap())?;
                let feats = compute_lfb(&wav, &opts.features)?;
                let words = transcript_words(rec.transcript.as_ref());
                (SourceData::Audio(feats), bpe.encode_target(&task, &words)?)
            }
            TaskKind::Mlm => {
                let wav = load_audio(rec.audio_path.as_ref().unwrap())?;
                let align_rel = rec.alignment_path.as_ref().unwrap();
                let align_path = manifest.resolve(align_rel);
                let align_json =
                    std::fs::read_to_string(&align_path).map_err(|_| CorpusError::BadReference {
                        id: rec.id.clone(),
                        path: align_path.display().to_string(),
                    })?;
                let alignment = WordAlignment::from_json(&align_json)?;
                let (masked, _) = mask_audio(
                    &wav,
                    &alignment,
                    opts.mlm_fraction,
                    derive_seed(opts.seed, &format!("mlm:{}", rec.id)),
                )?;
                let feats = compute_lfb(&masked, &opts.features)?;
                // The target is the entire transcript, mask or no mask.
                let words = transcript_words(rec.transcript.as_ref());
                (SourceData::Audio(feats), bpe.encode_target(&task, &words)?)
            }
            TaskKind::Nlu => {
                let text = rec.transcript.as_ref().unwrap();
                let ids = bpe.encode_text(text);
                let atoms = parse_atoms(rec.parse.as_ref().unwrap(), rec.transcript.as_ref())?;
                (SourceData::Text(ids), bpe.encode_target(&task, &atoms)?)
            }
            TaskKind::Custom(_) => {
                let wav = load_audio(rec.audio_path.as_ref().unwrap())?;
                let feats = compute_lfb(&wav, &opts.features)?;
                let words = transcript_words(rec.transcript.as_ref());
                (SourceData::Audio(feats), bpe.encode_target(&task, &words)?)
            }
        };
        out.push(TaskInstance {
            id: rec.id.clone(),
            domain: rec.domain.clone(),
            task,
            source,
            target,
        });
    }
    Ok(out)
}

/// Gold references for scoring a manifest with parses (SLU/NLU).
pub fn gold_records(manifest: &Manifest) -> Result<Vec<GoldRecord>, CorpusError> {
    let mut records = manifest.records.clone();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = Vec::with_capacity(records.len());
    for rec in &records {
        let parse = rec.parse.as_ref().ok_or_else(|| CorpusError::MissingField {
            id: rec.id.clone(),
            field: "parse",
        })?;
        let words = match rec.transcript.as_ref() {
            Some(t) => t.split_whitespace().map(str::to_string).collect(),
            None => parse.leaf_words(),
        };
        out.push(GoldRecord::new(rec.id.clone(), parse.clone(), &words)?);
    }
    Ok(out)
}

/// All tag atoms (bracket tokens) appearing in a set of manifests, sorted.
/// These become atomic specials in the tokenizer.
pub fn tag_atoms(manifests: &[&Manifest]) -> Vec<String> {
    let mut tags = std::collections::BTreeSet::new();
    for m in manifests {
        for rec in &m.records {
            if let Some(parse) = &rec.parse {
                collect_tags(parse, &mut tags);
            }
        }
    }
    if !tags.is_empty() {
        tags.insert("]".to_string());
    }
    tags.into_iter().collect()
}

fn collect_tags(p: &crate::text::SemanticParse, out: &mut std::collections::BTreeSet<String>) {
    out.insert(format!("[IN:{}", p.intent));
    for c in &p.children {
        out.insert(format!("[SL:{}", c.slot));
        if let crate::text::SlotValue::Nested(q) = &c.value {
            collect_tags(q, out);
        }
    }
}

/// Plain transcripts of a set of manifests (BPE training text).
pub fn transcripts(manifests: &[&Manifest]) -> Vec<String> {
    let mut out = Vec::new();
    for m in manifests {
        for rec in &m.records {
            if let Some(t) = &rec.transcript {
                out.push(t.clone());
            }
        }
    }
    out
}

/// Convert features into the model element type.
pub fn feats_to_array<F: crate::model::Scalar>(f: &AudioFeatureSequence) -> Array2<F> {
    f.frames.mapv(|v| F::from_f64(v as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_world, SynthWorldConfig};
    use crate::text::{EOS_ID, PAD_ID};

    fn world() -> (tempfile::TempDir, crate::corpus::GeneratedWorld, SynthWorldConfig) {
        let mut cfg = SynthWorldConfig::stock(21);
        cfg.samples_per_split = 10;
        cfg.eval_samples = 3;
        let dir = tempfile::tempdir().unwrap();
        let w = generate_world(&cfg, dir.path()).unwrap();
        (dir, w, cfg)
    }

    fn bpe_for(world: &crate::corpus::GeneratedWorld) -> BpeModel {
        let m_slu = Manifest::load(world.manifest("music", "slu", "train").unwrap()).unwrap();
        let m_asr = Manifest::load(world.manifest("music", "asr", "train").unwrap()).unwrap();
        let texts = transcripts(&[&m_slu, &m_asr]);
        let tags = tag_atoms(&[&m_slu]);
        BpeModel::train(
            &texts,
            200,
            &[TaskKind::Slu, TaskKind::Asr, TaskKind::Mlm, TaskKind::Nlu],
            &tags,
        )
        .unwrap()
    }

    #[test]
    fn load_counts_match_and_targets_are_well_formed() {
        let (_dir, world, _cfg) = world();
        let bpe = bpe_for(&world);
        let m = Manifest::load(world.manifest("music", "slu", "train").unwrap()).unwrap();
        let instances = load_manifest(&m, &bpe, &LoaderOptions::default()).unwrap();
        assert_eq!(instances.len(), 10);
        for inst in &instances {
            assert_eq!(inst.target.tokens[0], bpe.bos_id(&TaskKind::Slu).unwrap());
            assert_eq!(*inst.target.tokens.last().unwrap(), EOS_ID);
            assert!(!inst.target.tokens.contains(&PAD_ID));
            assert!(matches!(inst.source, SourceData::Audio(_)));
        }
        // Stable id ordering.
        let mut ids: Vec<&String> = instances.iter().map(|i| &i.id).collect();
        let sorted = {
            let mut s = ids.clone();
            s.sort();
            s
        };
        ids.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn mlm_targets_are_full_transcripts_with_masked_audio() {
        let (_dir, world, cfg) = world();
        let bpe = bpe_for(&world);
        let m = Manifest::load(world.manifest("music", "mlm", "train").unwrap()).unwrap();
        let opts = LoaderOptions::default();
        let instances = load_manifest(&m, &bpe, &opts).unwrap();
        let mut records = m.records.clone();
        records.sort_by(|a, b| a.id.cmp(&b.id));
        for (inst, rec) in instances.iter().zip(&records) {
            let transcript = rec.transcript.as_ref().unwrap();
            assert_eq!(&bpe.decode_target(&inst.target.tokens).unwrap(), transcript);
            // Masked features differ from unmasked ones.
            let wav = load_wav(&m.resolve(rec.audio_path.as_ref().unwrap())).unwrap();
            let clean = compute_lfb(&wav, &opts.features).unwrap();
            if let SourceData::Audio(masked) = &inst.source {
                assert_eq!(masked.num_frames(), clean.num_frames());
                assert_ne!(masked.frames, clean.frames);
            } else {
                panic!("mlm source must be audio");
            }
        }
        let _ = cfg;
    }

    #[test]
    fn missing_parse_is_reported_with_the_record_id() {
        let (_dir, world, _cfg) = world();
        let bpe = bpe_for(&world);
        let mut m = Manifest::load(world.manifest("music", "slu", "train").unwrap()).unwrap();
        m.records[0].parse = None;
        let err = load_manifest(&m, &bpe, &LoaderOptions::default()).unwrap_err();
        match err {
            CorpusError::MissingField { id, field } => {
                assert_eq!(id, m.records[0].id);
                assert_eq!(field, "parse");
            }
            other => panic!("expected MissingField, got {other:?}"),
        }
    }

    #[test]
    fn nlu_sources_are_token_ids_of_the_transcript() {
        let (_dir, world, _cfg) = world();
        let bpe = bpe_for(&world);
        let m = Manifest::load(world.manifest("music", "nlu", "train").unwrap()).unwrap();
        let instances = load_manifest(&m, &bpe, &LoaderOptions::default()).unwrap();
        let mut records = m.records.clone();
        records.sort_by(|a, b| a.id.cmp(&b.id));
        for (inst, rec) in instances.iter().zip(&records) {
            match &inst.source {
                SourceData::Text(ids) => {
                    assert_eq!(ids, &bpe.encode_text(rec.transcript.as_ref().unwrap()));
                }
                _ => panic!("nlu source must be text"),
            }
        }
    }
}
