//! Autoregressive inference from either encoder: greedy decoding and
//! length-normalized beam search conditioned on a task BOS token.

use serde::{Deserialize, Serialize};

use crate::model::{AtatModel, EncodedSequence, ModelError, Scalar};
use crate::text::{TargetSequence, TaskKind, EOS_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// GNMT-style length penalty exponent; 0 disables normalization.
    pub length_penalty: f64,
    pub task: TaskKind,
}

impl DecodeConfig {
    pub fn new(task: TaskKind) -> Self {
        Self { beam_size: 4, max_len: 48, length_penalty: 0.0, task }
    }
}

/// One decoded candidate. `finished` is false when the hypothesis ran into
/// `max_len` without emitting EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedHypothesis {
    pub seq: TargetSequence,
    pub score: f64,
    pub finished: bool,
}

fn length_normalized(sum_log_prob: f64, generated: usize, alpha: f64) -> f64 {
    if alpha <= 0.0 {
        return sum_log_prob;
    }
    let lp = ((5.0 + generated as f64) / 6.0).powf(alpha);
    sum_log_prob / lp
}

/// Argmax decoding: one token per step until EOS or `max_len` generated
/// tokens. Ties pick the lower token id.
pub fn greedy_decode<F: Scalar>(
    model: &AtatModel<F>,
    enc: &EncodedSequence<F>,
    cfg: &DecodeConfig,
    bos_id: u32,
) -> Result<DecodedHypothesis, ModelError> {
    assert!(cfg.max_len >= 1, "max_len must be >= 1");
    let mut tokens = vec![bos_id];
    let mut sum = 0.0;
    let mut finished = false;
    for _ in 0..cfg.max_len {
        let lp = model.next_log_probs(enc, &tokens)?;
        let mut best = 0usize;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        sum += lp[best];
        tokens.push(best as u32);
        if best as u32 == EOS_ID {
            finished = true;
            break;
        }
    }
    let generated = tokens.len() - 1;
    Ok(DecodedHypothesis {
        seq: TargetSequence { task: cfg.task.clone(), tokens },
        score: length_normalized(sum, generated, cfg.length_penalty),
        finished,
    })
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<u32>,
    sum_log_prob: f64,
}

impl Beam {
    fn generated(&self) -> usize {
        self.tokens.len() - 1
    }
}

/// Standard beam search over sum-of-log-probs with optional length
/// normalization. Finished hypotheses retire from the beam; the top
/// `beam_size` finished sequences come back sorted by score (ties broken by
/// token ids, lower first). When nothing finishes within `max_len`, the
/// best unfinished hypotheses are returned flagged `finished: false`.
pub fn beam_search<F: Scalar>(
    model: &AtatModel<F>,
    enc: &EncodedSequence<F>,
    cfg: &DecodeConfig,
    bos_id: u32,
) -> Result<Vec<DecodedHypothesis>, ModelError> {
    assert!(cfg.beam_size >= 1 && cfg.max_len >= 1, "beam_size and max_len must be >= 1");
    let alpha = cfg.length_penalty;
    let mut active = vec![Beam { tokens: vec![bos_id], sum_log_prob: 0.0 }];
    let mut finished: Vec<Beam> = Vec::new();

    for _ in 0..cfg.max_len {
        if active.is_empty() {
            break;
        }
        let mut candidates: Vec<Beam> = Vec::with_capacity(active.len() * 4);
        for beam in &active {
            let lp = model.next_log_probs(enc, &beam.tokens)?;
            for (tok, &lp_tok) in lp.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Beam { tokens, sum_log_prob: beam.sum_log_prob + lp_tok });
            }
        }
        sort_beams(&mut candidates, alpha);
        active = Vec::with_capacity(cfg.beam_size);
        for cand in candidates.into_iter().take(cfg.beam_size) {
            if *cand.tokens.last().unwrap() == EOS_ID {
                finished.push(cand);
            } else {
                active.push(cand);
            }
        }
    }

    let (pool, is_finished) =
        if finished.is_empty() { (active, false) } else { (finished, true) };
    let mut pool = pool;
    sort_beams(&mut pool, alpha);
    Ok(pool
        .into_iter()
        .take(cfg.beam_size)
        .map(|b| {
            let score = length_normalized(b.sum_log_prob, b.generated(), alpha);
            DecodedHypothesis {
                seq: TargetSequence { task: cfg.task.clone(), tokens: b.tokens },
                score,
                finished: is_finished,
            }
        })
        .collect())
}

fn sort_beams(beams: &mut [Beam], alpha: f64) {
    beams.sort_by(|a, b| {
        let sa = length_normalized(a.sum_log_prob, a.generated(), alpha);
        let sb = length_normalized(b.sum_log_prob, b.generated(), alpha);
        sb.partial_cmp(&sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Exhaustive reference decoder: enumerate every token sequence up to
/// `max_len`, score finished ones exactly like the beam, return them all
/// sorted. Exponential; test use only.
pub fn enumerate_all<F: Scalar>(
    model: &AtatModel<F>,
    enc: &EncodedSequence<F>,
    cfg: &DecodeConfig,
    bos_id: u32,
) -> Result<Vec<DecodedHypothesis>, ModelError> {
    let vocab = model.cfg().vocab_size as u32;
    let mut out = Vec::new();
    let mut stack = vec![Beam { tokens: vec![bos_id], sum_log_prob: 0.0 }];
    while let Some(beam) = stack.pop() {
        if beam.generated() >= cfg.max_len {
            continue;
        }
        let lp = model.next_log_probs(enc, &beam.tokens)?;
        for tok in 0..vocab {
            let mut tokens = beam.tokens.clone();
            tokens.push(tok);
            let next = Beam { tokens, sum_log_prob: beam.sum_log_prob + lp[tok as usize] };
            if tok == EOS_ID {
                out.push(next);
            } else {
                stack.push(next);
            }
        }
    }
    let mut pool = out;
    sort_beams(&mut pool, cfg.length_penalty);
    Ok(pool
        .into_iter()
        .map(|b| {
            let score = length_normalized(b.sum_log_prob, b.generated(), cfg.length_penalty);
            DecodedHypothesis {
                seq: TargetSequence { task: cfg.task.clone(), tokens: b.tokens },
                score,
                finished: true,
            }
        })
        .collect())
}
