//! Deterministic synthetic world: template-generated utterances with
//! intent/slot parses, tone-signature audio per word, exact alignments, and
//! a TTS stub sharing the same synthesis path.
//!
//! Every word in the world lexicon maps to a fixed stack of three sine
//! tones; utterances concatenate word tones with short silences. The
//! structure the model must learn (temporal word units, alignment, masking)
//! is preserved while keeping generation fully seeded.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AlignedWord, Waveform, WordAlignment, CANONICAL_SAMPLE_RATE};
use crate::util::{derive_seed, rng_from_seed};

use super::{CorpusError, Manifest, ManifestRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<String>,
    pub min_words: usize,
    pub max_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TemplateItem {
    /// A fixed carrier word.
    Lit(String),
    /// A slot filled from a named lexicon.
    Slot { slot: String, lexicon: String },
    /// A slot holding a nested intent. The inner template must start and
    /// end with slot content so the nested yield is recoverable from the
    /// transcript.
    Nested { slot: String, template: Box<Template> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub intent: String,
    pub items: Vec<TemplateItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Which task manifests to emit for this domain.
    pub tasks: Vec<String>,
    pub templates: Vec<Template>,
    pub lexicons: BTreeMap<String, Lexicon>,
    /// ASR/MLM utterances: template transcripts when true, word salad over
    /// the full lexicon when false.
    pub asr_from_templates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorldConfig {
    pub seed: u64,
    /// Training records per task per domain.
    pub samples_per_split: usize,
    /// Valid and test records per task per domain.
    pub eval_samples: usize,
    pub word_duration_ms: u32,
    pub gap_ms: u32,
    pub amplitude: f64,
    /// Per-word noise level in dBFS; very low by default.
    pub noise_db: f64,
    /// The global word pool; each word gets a distinct tone signature from
    /// its index here.
    pub vocab_words: Vec<String>,
    pub domains: Vec<DomainSpec>,
}

impl SynthWorldConfig {
    /// The stock three-domain world: flat "music", flat "books" with labels
    /// disjoint from music, and the nested "toplike" domain.
    pub fn stock(seed: u64) -> Self {
        let nato: Vec<String> = [
            "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india",
            "juliet", "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo",
            "sierra", "tango",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let numbers: Vec<String> = ["one", "two", "three", "four", "five", "six"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let carriers = [
            "play", "the", "song", "album", "by", "stop", "pause", "music", "read", "open",
            "book", "chapter", "from", "close", "directions", "to", "estimate", "route", "near",
            "show", "at",
        ];

        let mut vocab_words: Vec<String> = Vec::new();
        vocab_words.extend(nato.iter().cloned());
        vocab_words.extend(numbers.iter().cloned());
        vocab_words.extend(carriers.iter().map(|s| s.to_string()));

        let lit = |w: &str| TemplateItem::Lit(w.to_string());
        let slot = |s: &str, l: &str| TemplateItem::Slot { slot: s.into(), lexicon: l.into() };

        let music = DomainSpec {
            name: "music".into(),
            tasks: vec!["slu".into(), "asr".into(), "mlm".into(), "nlu".into()],
            templates: vec![
                Template {
                    intent: "PLAY_SONG".into(),
                    items: vec![lit("play"), lit("the"), lit("song"), slot("SONG_NAME", "names")],
                },
                Template {
                    intent: "PLAY_SONG".into(),
                    items: vec![
                        lit("play"),
                        slot("SONG_NAME", "names"),
                        lit("by"),
                        slot("ARTIST_NAME", "short_names"),
                    ],
                },
                Template {
                    intent: "PLAY_ALBUM".into(),
                    items: vec![lit("play"), lit("the"), lit("album"), slot("ALBUM_NAME", "names")],
                },
                Template {
                    intent: "STOP_MUSIC".into(),
                    items: vec![lit("stop"), lit("the"), lit("music")],
                },
                Template {
                    intent: "PAUSE_MUSIC".into(),
                    items: vec![lit("pause"), lit("the"), lit("music")],
                },
            ],
            lexicons: BTreeMap::from([
                ("names".into(), Lexicon { words: nato.clone(), min_words: 1, max_words: 2 }),
                ("short_names".into(), Lexicon { words: nato.clone(), min_words: 1, max_words: 1 }),
            ]),
            asr_from_templates: true,
        };

        let books = DomainSpec {
            name: "books".into(),
            tasks: vec!["slu".into(), "nlu".into()],
            templates: vec![
                Template {
                    intent: "READ_BOOK".into(),
                    items: vec![lit("read"), lit("the"), lit("book"), slot("BOOK_NAME", "names")],
                },
                Template {
                    intent: "READ_BOOK".into(),
                    items: vec![
                        lit("read"),
                        slot("BOOK_NAME", "names"),
                        lit("by"),
                        slot("AUTHOR_NAME", "short_names"),
                    ],
                },
                Template {
                    intent: "OPEN_CHAPTER".into(),
                    items: vec![
                        lit("open"),
                        lit("chapter"),
                        slot("CHAPTER_NUM", "numbers"),
                        lit("from"),
                        slot("BOOK_NAME", "names"),
                    ],
                },
                Template {
                    intent: "CLOSE_BOOK".into(),
                    items: vec![lit("close"), lit("the"), lit("book")],
                },
            ],
            lexicons: BTreeMap::from([
                ("names".into(), Lexicon { words: nato.clone(), min_words: 1, max_words: 2 }),
                ("short_names".into(), Lexicon { words: nato.clone(), min_words: 1, max_words: 1 }),
                ("numbers".into(), Lexicon { words: numbers.clone(), min_words: 1, max_words: 1 }),
            ]),
            asr_from_templates: true,
        };

        let event = Template {
            intent: "GET_EVENT".into(),
            items: vec![
                slot("EVENT_NAME", "names"),
                lit("near"),
                slot("EVENT_CITY", "short_names"),
            ],
        };
        let toplike = DomainSpec {
            name: "toplike".into(),
            tasks: vec!["slu".into(), "nlu".into()],
            templates: vec![
                Template {
                    intent: "GET_DIRECTIONS".into(),
                    items: vec![
                        lit("directions"),
                        lit("to"),
                        TemplateItem::Nested {
                            slot: "DESTINATION".into(),
                            template: Box::new(event.clone()),
                        },
                    ],
                },
                Template {
                    intent: "GET_DIRECTIONS".into(),
                    items: vec![lit("directions"), lit("to"), slot("PLACE_NAME", "names")],
                },
                Template {
                    intent: "GET_ESTIMATE".into(),
                    items: vec![
                        lit("estimate"),
                        lit("the"),
                        lit("route"),
                        lit("to"),
                        slot("PLACE_NAME", "names"),
                    ],
                },
            ],
            lexicons: BTreeMap::from([
                ("names".into(), Lexicon { words: nato.clone(), min_words: 1, max_words: 2 }),
                ("short_names".into(), Lexicon { words: nato, min_words: 1, max_words: 1 }),
            ]),
            asr_from_templates: false,
        };

        Self {
            seed,
            samples_per_split: 2000,
            eval_samples: 200,
            word_duration_ms: 120,
            gap_ms: 20,
            amplitude: 0.35,
            noise_db: -55.0,
            vocab_words,
            domains: vec![music, books, toplike],
        }
    }

    fn word_index(&self, word: &str) -> Option<usize> {
        self.vocab_words.iter().position(|w| w == word)
    }
}

/// Tone signature for one word: three sines at frequencies derived from the
/// word's pool index, a short fade envelope, and seeded low-level noise.
fn word_samples(cfg: &SynthWorldConfig, word: &str, speaker_offset: f64) -> Result<Vec<i16>, CorpusError> {
    let idx = cfg
        .word_index(word)
        .ok_or_else(|| CorpusError::UnknownWord(word.to_string()))?;
    let sr = CANONICAL_SAMPLE_RATE as f64;
    let n = (cfg.word_duration_ms as usize * CANONICAL_SAMPLE_RATE as usize) / 1000;
    let a = (idx % 8) as f64;
    let b = (idx / 8) as f64;
    let freqs = [
        (300.0 + 90.0 * a) * speaker_offset,
        (1500.0 + 110.0 * b) * speaker_offset,
        (3400.0 + 70.0 * (((idx % 8) + idx / 8) % 8) as f64) * speaker_offset,
    ];
    let amps = [0.5, 0.3, 0.2].map(|x: f64| x * cfg.amplitude);
    let noise_amp = 10f64.powf(cfg.noise_db / 20.0);
    let offset_key = (speaker_offset * 1e6).round() as i64;
    let mut noise_rng =
        rng_from_seed(derive_seed(cfg.seed, &format!("noise:{word}:{offset_key}")));
    let ramp = (n / 8).min((CANONICAL_SAMPLE_RATE as usize * 10) / 1000).max(1);

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let mut v = 0.0;
        for (f, amp) in freqs.iter().zip(amps.iter()) {
            v += amp * (2.0 * std::f64::consts::PI * f * t).sin();
        }
        v += noise_amp * (noise_rng.gen::<f64>() * 2.0 - 1.0);
        let env = if i < ramp {
            i as f64 / ramp as f64
        } else if i + ramp >= n {
            (n - i - 1) as f64 / ramp as f64
        } else {
            1.0
        };
        out.push((v * env * 32767.0).round().clamp(-32768.0, 32767.0) as i16);
    }
    Ok(out)
}

/// Synthesize a transcript word by word; the shared path behind both
/// generated corpora and the TTS stub. Words are separated (and followed)
/// by `gap_ms` of silence.
pub fn synthesize_utterance(
    cfg: &SynthWorldConfig,
    words: &[String],
    speaker_offset: f64,
) -> Result<(Waveform, WordAlignment), CorpusError> {
    if words.is_empty() {
        return Err(CorpusError::UnknownWord("<empty transcript>".into()));
    }
    let gap = (cfg.gap_ms as usize * CANONICAL_SAMPLE_RATE as usize) / 1000;
    let word_ms = cfg.word_duration_ms as f64;
    let gap_ms = cfg.gap_ms as f64;
    let mut samples = Vec::new();
    let mut entries = Vec::new();
    for (k, w) in words.iter().enumerate() {
        samples.extend(word_samples(cfg, w, speaker_offset)?);
        samples.extend(std::iter::repeat(0i16).take(gap));
        let start_ms = k as f64 * (word_ms + gap_ms);
        entries.push(AlignedWord { word: w.clone(), start_ms, end_ms: start_ms + word_ms });
    }
    let wav = Waveform::new(samples, CANONICAL_SAMPLE_RATE)?;
    let align = WordAlignment::new(entries)?;
    Ok((wav, align))
}

/// The TTS stub: identical synthesis to the generated world, with a speaker
/// offset scaling every tone frequency.
pub fn tts_stub(
    transcript: &str,
    cfg: &SynthWorldConfig,
    speaker_offset: f64,
) -> Result<Waveform, CorpusError> {
    let words: Vec<String> = transcript.split_whitespace().map(str::to_string).collect();
    synthesize_utterance(cfg, &words, speaker_offset).map(|(w, _)| w)
}

/// Evenly spaced speaker offsets (0.9 ..= 1.1 for 9 speakers).
pub fn speaker_offsets(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.9 + 0.2 * i as f64 / (n - 1) as f64).collect()
}

/// A generated utterance before audio synthesis.
struct Drawn {
    words: Vec<String>,
    parse: Option<crate::text::SemanticParse>,
}

fn draw_from_template(
    t: &Template,
    lexicons: &BTreeMap<String, Lexicon>,
    rng: &mut ChaCha8Rng,
) -> Result<Drawn, CorpusError> {
    use crate::text::{SemanticParse, SlotChild, SlotValue};
    fn rec(
        t: &Template,
        lexicons: &BTreeMap<String, Lexicon>,
        rng: &mut ChaCha8Rng,
        words: &mut Vec<String>,
    ) -> Result<SemanticParse, CorpusError> {
        let mut parse = SemanticParse::new(t.intent.clone());
        for item in &t.items {
            match item {
                TemplateItem::Lit(w) => words.push(w.clone()),
                TemplateItem::Slot { slot, lexicon } => {
                    let lex = lexicons.get(lexicon).ok_or_else(|| {
                        CorpusError::LexiconTooSmall(format!("lexicon '{lexicon}' not defined"))
                    })?;
                    if lex.words.is_empty() {
                        return Err(CorpusError::LexiconTooSmall(format!(
                            "lexicon '{lexicon}' is empty"
                        )));
                    }
                    let k = rng.gen_range(lex.min_words..=lex.max_words);
                    let mut value = Vec::with_capacity(k);
                    for _ in 0..k {
                        value.push(lex.words[rng.gen_range(0..lex.words.len())].clone());
                    }
                    words.extend(value.iter().cloned());
                    parse
                        .children
                        .push(SlotChild { slot: slot.clone(), value: SlotValue::Words(value) });
                }
                TemplateItem::Nested { slot, template } => {
                    let inner = rec(template, lexicons, rng, words)?;
                    parse.children.push(SlotChild {
                        slot: slot.clone(),
                        value: SlotValue::Nested(Box::new(inner)),
                    });
                }
            }
        }
        Ok(parse)
    }
    let mut words = Vec::new();
    let parse = rec(t, lexicons, rng, &mut words)?;
    Ok(Drawn { words, parse: Some(parse) })
}

fn draw_salad(pool: &[String], counter: usize, rng: &mut ChaCha8Rng) -> Drawn {
    // First word cycles through the pool so coverage is guaranteed; the
    // rest are uniform.
    let n = rng.gen_range(3..=6);
    let mut words = vec![pool[counter % pool.len()].clone()];
    for _ in 1..n {
        words.push(pool[rng.gen_range(0..pool.len())].clone());
    }
    Drawn { words, parse: None }
}

/// Paths of everything a world generation produced.
#[derive(Debug, Clone)]
pub struct GeneratedWorld {
    pub out_dir: PathBuf,
    /// (domain, task, split) -> manifest path.
    pub manifests: BTreeMap<(String, String, String), PathBuf>,
}

impl GeneratedWorld {
    pub fn manifest(&self, domain: &str, task: &str, split: &str) -> Option<&PathBuf> {
        self.manifests
            .get(&(domain.to_string(), task.to_string(), split.to_string()))
    }
}

/// Generate manifests, WAVs, and alignments for every (domain, task, split)
/// in the config. Byte-identical for identical (config, seed).
pub fn generate_world(cfg: &SynthWorldConfig, out_dir: &Path) -> Result<GeneratedWorld, CorpusError> {
    let wav_root = out_dir.join("wav");
    let align_root = out_dir.join("align");
    let man_root = out_dir.join("manifests");
    fs::create_dir_all(&man_root)?;
    fs::write(
        out_dir.join("world.json"),
        serde_json::to_string_pretty(cfg).expect("config serializes"),
    )?;

    let mut manifests = BTreeMap::new();
    for domain in &cfg.domains {
        fs::create_dir_all(wav_root.join(&domain.name))?;
        fs::create_dir_all(align_root.join(&domain.name))?;
        // Transcripts used in any training split of this domain; eval
        // splits avoid them where possible.
        let mut train_strings: HashSet<String> = HashSet::new();

        // Split-major order: every training split in the domain lands in
        // `train_strings` before any eval split draws against it.
        for (split, count) in
            [("train", cfg.samples_per_split), ("valid", cfg.eval_samples), ("test", cfg.eval_samples)]
        {
            for task in &domain.tasks {
                let mut records = Vec::with_capacity(count);
                for i in 0..count {
                    let id = format!("{}-{}-{}-{:05}", domain.name, task, split, i);
                    let mut rng = rng_from_seed(derive_seed(cfg.seed, &id));
                    let from_templates =
                        task == "slu" || task == "nlu" || domain.asr_from_templates;

                    let mut attempt = 0;
                    let mut drawn = loop {
                        let candidate = if from_templates {
                            let t = &domain.templates[rng.gen_range(0..domain.templates.len())];
                            draw_from_template(t, &domain.lexicons, &mut rng)?
                        } else {
                            draw_salad(&cfg.vocab_words, i, &mut rng)
                        };
                        if split == "train" {
                            break candidate;
                        }
                        // Keep eval splits disjoint from training where the
                        // template space allows it; slotless templates can
                        // never be, so give up after a bounded retry.
                        let key = candidate.words.join(" ");
                        if !train_strings.contains(&key) || attempt >= 40 {
                            break candidate;
                        }
                        attempt += 1;
                    };
                    let transcript = drawn.words.join(" ");
                    if split == "train" {
                        train_strings.insert(transcript.clone());
                    }

                    let needs_audio = task != "nlu";
                    let (audio_path, alignment_path) = if needs_audio {
                        let (wav, align) = synthesize_utterance(cfg, &drawn.words, 1.0)?;
                        let wav_rel = format!("../wav/{}/{id}.wav", domain.name);
                        let align_rel = format!("../align/{}/{id}.json", domain.name);
                        write_wav(&wav_root.join(&domain.name).join(format!("{id}.wav")), &wav)?;
                        fs::write(
                            align_root.join(&domain.name).join(format!("{id}.json")),
                            align.to_json(),
                        )?;
                        (Some(wav_rel), Some(align_rel))
                    } else {
                        (None, None)
                    };

                    let parse = match task.as_str() {
                        "slu" | "nlu" => drawn.parse.take(),
                        _ => None,
                    };
                    records.push(ManifestRecord {
                        id,
                        task: task.clone(),
                        audio_path,
                        transcript: Some(transcript),
                        parse,
                        alignment_path: if task == "mlm" { alignment_path } else { None },
                        domain: domain.name.clone(),
                    });
                }
                let path = man_root.join(format!("{}.{}.{}.jsonl", domain.name, task, split));
                Manifest::save(&records, &path)?;
                manifests.insert(
                    (domain.name.clone(), task.clone(), split.to_string()),
                    path,
                );
            }
        }
    }
    Ok(GeneratedWorld { out_dir: out_dir.to_path_buf(), manifests })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{compute_lfb, FeatureConfig};

    fn tiny_cfg(seed: u64) -> SynthWorldConfig {
        let mut cfg = SynthWorldConfig::stock(seed);
        cfg.samples_per_split = 12;
        cfg.eval_samples = 4;
        cfg
    }

    #[test]
    fn generation_is_byte_identical_per_seed() {
        let cfg = tiny_cfg(5);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let w1 = generate_world(&cfg, d1.path()).unwrap();
        generate_world(&cfg, d2.path()).unwrap();
        for ((domain, task, split), p1) in &w1.manifests {
            let rel = p1.strip_prefix(d1.path()).unwrap();
            let b1 = fs::read(p1).unwrap();
            let b2 = fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(b1, b2, "manifest {domain}/{task}/{split} differs");
        }
        // Spot-check one wav byte-for-byte.
        let m = Manifest::load(w1.manifest("music", "slu", "train").unwrap()).unwrap();
        let rec = &m.records[0];
        let wav_rel = rec.audio_path.as_ref().unwrap();
        let w1b = fs::read(m.resolve(wav_rel)).unwrap();
        let w2b = fs::read(
            d2.path()
                .join("manifests")
                .join("..")
                .join(wav_rel.trim_start_matches("../")),
        )
        .unwrap();
        assert_eq!(w1b, w2b);
    }

    #[test]
    fn generated_audio_passes_masking_and_round_trips_parses() {
        use crate::audio::{load_wav, mask_audio};
        use crate::text::{delinearize, linearize};
        let cfg = tiny_cfg(6);
        let dir = tempfile::tempdir().unwrap();
        let world = generate_world(&cfg, dir.path()).unwrap();
        let m = Manifest::load(world.manifest("music", "slu", "train").unwrap()).unwrap();
        for rec in &m.records {
            let wav = load_wav(&m.resolve(rec.audio_path.as_ref().unwrap())).unwrap();
            // World construction guarantees alignments stay within the
            // waveform.
            let (utt, align) = synthesize_utterance(
                &cfg,
                &rec.transcript
                    .as_ref()
                    .unwrap()
                    .split_whitespace()
                    .map(str::to_string)
                    .collect::<Vec<_>>(),
                1.0,
            )
            .unwrap();
            assert_eq!(utt, wav);
            mask_audio(&wav, &align, 0.15, 1).unwrap();

            let parse = rec.parse.as_ref().unwrap();
            let words: Vec<String> =
                rec.transcript.as_ref().unwrap().split_whitespace().map(str::to_string).collect();
            let atoms = linearize(parse, &words).unwrap();
            assert_eq!(&delinearize(&atoms).unwrap().parse, parse);
        }
    }

    #[test]
    fn tts_stub_matches_generated_segments_and_offsets_differ() {
        let cfg = tiny_cfg(7);
        let words: Vec<String> = vec!["play".into(), "alpha".into()];
        let (utt, align) = synthesize_utterance(&cfg, &words, 1.0).unwrap();
        let solo = tts_stub("play", &cfg, 1.0).unwrap();
        // The word's segment inside the utterance is sample-identical to
        // the stub's output for that word (plus the trailing gap).
        let n = (cfg.word_duration_ms as usize * 16_000) / 1000;
        assert_eq!(&utt.samples[..n], &solo.samples[..n]);
        assert_eq!(align.entries[0].start_ms, 0.0);

        let offsets = speaker_offsets(9);
        assert_eq!(offsets.len(), 9);
        assert!((offsets[0] - 0.9).abs() < 1e-12 && (offsets[8] - 1.1).abs() < 1e-12);
        let waves: Vec<Waveform> =
            offsets.iter().map(|&o| tts_stub("play alpha", &cfg, o).unwrap()).collect();
        for i in 0..waves.len() {
            for j in i + 1..waves.len() {
                assert_ne!(waves[i].samples, waves[j].samples, "offsets {i} and {j} collide");
            }
        }
    }

    #[test]
    fn empty_transcript_is_unknown_word() {
        let cfg = tiny_cfg(8);
        assert!(matches!(tts_stub("", &cfg, 1.0), Err(CorpusError::UnknownWord(_))));
        assert!(matches!(tts_stub("zzz", &cfg, 1.0), Err(CorpusError::UnknownWord(_))));
    }

    #[test]
    fn books_and_toplike_labels_are_disjoint_from_music() {
        let cfg = SynthWorldConfig::stock(0);
        let labels = |d: &DomainSpec| -> HashSet<String> {
            let mut out = HashSet::new();
            fn walk(t: &Template, out: &mut HashSet<String>) {
                out.insert(t.intent.clone());
                for item in &t.items {
                    match item {
                        TemplateItem::Slot { slot, .. } => {
                            out.insert(slot.clone());
                        }
                        TemplateItem::Nested { slot, template } => {
                            out.insert(slot.clone());
                            walk(template, out);
                        }
                        TemplateItem::Lit(_) => {}
                    }
                }
            }
            for t in &d.templates {
                walk(t, &mut out);
            }
            out
        };
        let music = labels(&cfg.domains[0]);
        let books = labels(&cfg.domains[1]);
        let toplike = labels(&cfg.domains[2]);
        assert!(music.is_disjoint(&books));
        assert!(music.is_disjoint(&toplike));
        assert!(books.is_disjoint(&toplike));
    }

    /// Separability fixture: a nearest-centroid (linear) classifier on mean
    /// LFB features must tell the pool words apart essentially perfectly,
    /// which is what makes the end-to-end tasks solvable at desk scale.
    #[test]
    fn word_signatures_are_linearly_separable() {
        let cfg = tiny_cfg(9);
        let fc = FeatureConfig::default();
        let words: Vec<&String> = cfg.vocab_words.iter().take(20).collect();
        let mut centroids = Vec::new();
        let mut test_feats: Vec<(usize, Vec<f32>)> = Vec::new();
        for (wi, w) in words.iter().enumerate() {
            // Train centroid at offset 1.0; test points at nearby offsets.
            let mean = |offset: f64| -> Vec<f32> {
                let wav = tts_stub(w, &cfg, offset).unwrap();
                let f = compute_lfb(&wav, &fc).unwrap();
                let t = f.num_frames() as f32;
                (0..f.num_mels())
                    .map(|m| (0..f.num_frames()).map(|i| f.frames[[i, m]]).sum::<f32>() / t)
                    .collect()
            };
            centroids.push(mean(1.0));
            for &o in &[0.98, 1.02] {
                test_feats.push((wi, mean(o)));
            }
        }
        let mut correct = 0;
        for (gold, feat) in &test_feats {
            let mut best = 0;
            let mut best_d = f32::INFINITY;
            for (ci, c) in centroids.iter().enumerate() {
                let d: f32 = c.iter().zip(feat).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            correct += (best == *gold) as usize;
        }
        let acc = correct as f64 / test_feats.len() as f64;
        assert!(acc > 0.99, "separability {acc} too low");
    }
}
