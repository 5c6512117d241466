//! Evaluation metrics: semantic error rate (SemER), hypothesis and
//! full-sequence exact match, HypER, labeled-bracket precision/recall/F1,
//! and tree validity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{
    delinearize_outcome, linearize, ParseOutcome, ParsedHypothesis, SemanticParse, TextError,
};

/// S/I/D error counts from aligning one predicted hypothesis to gold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SemerCounts {
    pub substitutions: u64,
    pub insertions: u64,
    pub deletions: u64,
    /// Gold slot count; the SemER denominator is this plus 1 for the intent.
    pub gold_slots: u64,
}

impl SemerCounts {
    pub fn errors(&self) -> u64 {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn score(&self) -> f64 {
        self.errors() as f64 / (self.gold_slots + 1) as f64
    }
}

/// Align predicted and gold slots by minimum cost over (name, value) pairs:
/// same name and value match free; same name with different values pair up
/// as substitutions; anything left is a deletion (gold side) or insertion
/// (predicted side). Intent mismatch is one substitution. Nested parses are
/// flattened to (slot-name, yield) pairs first.
pub fn semer(pred: &SemanticParse, gold: &SemanticParse) -> SemerCounts {
    let mut c = SemerCounts { gold_slots: gold.flat_slots().len() as u64, ..Default::default() };
    if pred.intent != gold.intent {
        c.substitutions += 1;
    }

    // name -> value -> count
    let mut pred_by_name: BTreeMap<&str, BTreeMap<&str, u64>> = BTreeMap::new();
    let pred_slots = pred.flat_slots();
    for (name, value) in &pred_slots {
        *pred_by_name.entry(name).or_default().entry(value).or_insert(0) += 1;
    }
    let gold_slots = gold.flat_slots();
    let mut gold_by_name: BTreeMap<&str, BTreeMap<&str, u64>> = BTreeMap::new();
    for (name, value) in &gold_slots {
        *gold_by_name.entry(name).or_default().entry(value).or_insert(0) += 1;
    }

    let names: std::collections::BTreeSet<&str> =
        pred_by_name.keys().chain(gold_by_name.keys()).copied().collect();
    for name in names {
        let empty = BTreeMap::new();
        let p = pred_by_name.get(name).unwrap_or(&empty);
        let g = gold_by_name.get(name).unwrap_or(&empty);
        let p_total: u64 = p.values().sum();
        let g_total: u64 = g.values().sum();
        // Exact (name, value) matches cost nothing.
        let mut matched = 0u64;
        for (value, &pc) in p {
            if let Some(&gc) = g.get(value) {
                matched += pc.min(gc);
            }
        }
        // Remaining same-name pairs are substitutions.
        let subs = (p_total - matched).min(g_total - matched);
        c.substitutions += subs;
        c.deletions += g_total - matched - subs;
        c.insertions += p_total - matched - subs;
    }
    c
}

/// SemER when the prediction may be an invalid tree: every gold slot counts
/// as deleted and the intent as substituted.
pub fn semer_outcome(pred: &ParseOutcome, gold: &SemanticParse) -> SemerCounts {
    match pred {
        ParseOutcome::Valid(h) => semer(&h.parse, gold),
        ParseOutcome::Invalid { .. } => SemerCounts {
            substitutions: 1,
            insertions: 0,
            deletions: gold.flat_slots().len() as u64,
            gold_slots: gold.flat_slots().len() as u64,
        },
    }
}

/// Hypothesis-level exact match: tree equality, order-insensitive among
/// sibling slots. Invalid predictions never match.
pub fn exact_match_hyp(pred: &ParseOutcome, gold: &SemanticParse) -> bool {
    match pred {
        ParseOutcome::Valid(h) => h.parse.tree_eq_unordered(gold),
        ParseOutcome::Invalid { .. } => false,
    }
}

/// Full-sequence exact match: the linearized token strings compared
/// verbatim.
pub fn exact_match_full(pred_text: &str, gold_text: &str) -> bool {
    pred_text == gold_text
}

/// Labeled-bracket precision/recall/F1 over (label, yield) constituents,
/// multiset matching.
pub fn bracket_prf(pred: &[(String, String)], gold: &[(String, String)]) -> (f64, f64, f64) {
    let matched = constituent_matches(pred, gold);
    let p = if pred.is_empty() { 0.0 } else { matched as f64 / pred.len() as f64 };
    let r = if gold.is_empty() { 0.0 } else { matched as f64 / gold.len() as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

fn constituent_matches(pred: &[(String, String)], gold: &[(String, String)]) -> u64 {
    let mut gold_counts: BTreeMap<&(String, String), u64> = BTreeMap::new();
    for c in gold {
        *gold_counts.entry(c).or_insert(0) += 1;
    }
    let mut matched = 0u64;
    for c in pred {
        if let Some(n) = gold_counts.get_mut(c) {
            if *n > 0 {
                *n -= 1;
                matched += 1;
            }
        }
    }
    matched
}

/// One decoded utterance to score.
#[derive(Debug, Clone)]
pub struct PredRecord {
    pub id: String,
    /// Decoded text (the linearized sequence as emitted).
    pub text: String,
    pub outcome: ParseOutcome,
}

impl PredRecord {
    /// Build from decoded text by splitting into atoms and delinearizing.
    pub fn from_text(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let atoms: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        Self { id: id.into(), text, outcome: delinearize_outcome(&atoms) }
    }
}

/// Gold reference for one utterance.
#[derive(Debug, Clone)]
pub struct GoldRecord {
    pub id: String,
    pub parse: SemanticParse,
    /// Canonical linearized text.
    pub linearized: String,
    pub hypothesis: ParsedHypothesis,
}

impl GoldRecord {
    pub fn new(
        id: impl Into<String>,
        parse: SemanticParse,
        transcript_tokens: &[String],
    ) -> Result<Self, TextError> {
        let atoms = linearize(&parse, transcript_tokens)?;
        let hypothesis = crate::text::delinearize(&atoms)?;
        Ok(Self { id: id.into(), parse, linearized: atoms.join(" "), hypothesis })
    }
}

/// Corpus-level metrics. SemER and P/R/F1 are micro-averaged (error and
/// match counts pooled over the corpus); exact-match rates are means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub semer: f64,
    pub em_hyp: f64,
    pub em_full: f64,
    pub hyp_er: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tree_validity: f64,
    pub substitutions: u64,
    pub insertions: u64,
    pub deletions: u64,
    pub total_slots: u64,
    pub n_examples: u64,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("utterance id mismatch at index {index}: pred '{pred}' vs gold '{gold}'")]
    IdMismatch { index: usize, pred: String, gold: String },
    #[error("pred and gold lengths differ: {pred} vs {gold}")]
    LengthMismatch { pred: usize, gold: usize },
}

pub fn evaluate_corpus(
    decoded: &[PredRecord],
    gold: &[GoldRecord],
) -> Result<MetricsReport, MetricsError> {
    if decoded.len() != gold.len() {
        return Err(MetricsError::LengthMismatch { pred: decoded.len(), gold: gold.len() });
    }
    let mut s = 0u64;
    let mut i_ = 0u64;
    let mut d = 0u64;
    let mut slots = 0u64;
    let mut em_hyp_sum = 0u64;
    let mut em_full_sum = 0u64;
    let mut valid = 0u64;
    let mut matched = 0u64;
    let mut pred_consts = 0u64;
    let mut gold_consts = 0u64;

    for (index, (p, g)) in decoded.iter().zip(gold).enumerate() {
        if p.id != g.id {
            return Err(MetricsError::IdMismatch {
                index,
                pred: p.id.clone(),
                gold: g.id.clone(),
            });
        }
        let c = semer_outcome(&p.outcome, &g.parse);
        s += c.substitutions;
        i_ += c.insertions;
        d += c.deletions;
        slots += c.gold_slots;
        em_hyp_sum += exact_match_hyp(&p.outcome, &g.parse) as u64;
        em_full_sum += exact_match_full(&p.text, &g.linearized) as u64;
        if let ParseOutcome::Valid(h) = &p.outcome {
            valid += 1;
            matched += constituent_matches(&h.constituents, &g.hypothesis.constituents);
            pred_consts += h.constituents.len() as u64;
        }
        gold_consts += g.hypothesis.constituents.len() as u64;
    }

    let n = decoded.len() as u64;
    let em_hyp = em_hyp_sum as f64 / n as f64;
    let em_full = em_full_sum as f64 / n as f64;
    let precision = if pred_consts == 0 { 0.0 } else { matched as f64 / pred_consts as f64 };
    let recall = if gold_consts == 0 { 0.0 } else { matched as f64 / gold_consts as f64 };
    let f1 =
        if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(MetricsReport {
        semer: (s + i_ + d) as f64 / (slots + n) as f64,
        em_hyp,
        em_full,
        hyp_er: 1.0 - em_hyp,
        precision,
        recall,
        f1,
        tree_validity: valid as f64 / n as f64,
        substitutions: s,
        insertions: i_,
        deletions: d,
        total_slots: slots,
        n_examples: n,
    })
}

/// Optional per-utterance CSV: id, semer, em_hyp, em_full, valid.
pub fn per_utterance_csv(decoded: &[PredRecord], gold: &[GoldRecord]) -> String {
    let mut out = String::from("id,semer,em_hyp,em_full,valid\n");
    for (p, g) in decoded.iter().zip(gold) {
        let c = semer_outcome(&p.outcome, &g.parse);
        out.push_str(&format!(
            "{},{:.6},{},{},{}\n",
            p.id,
            c.score(),
            exact_match_hyp(&p.outcome, &g.parse) as u8,
            exact_match_full(&p.text, &g.linearized) as u8,
            p.outcome.is_valid() as u8,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(intent: &str, slots: &[(&str, &str)]) -> SemanticParse {
        let mut p = SemanticParse::new(intent);
        for (name, value) in slots {
            let words: Vec<&str> = value.split_whitespace().collect();
            p = p.with_slot(*name, &words);
        }
        p
    }

    #[test]
    fn identical_parses_score_zero() {
        let p = parse("PLAY_SONG", &[("SONG_NAME", "watermelon sugar")]);
        let c = semer(&p, &p);
        assert_eq!(c.errors(), 0);
        assert_eq!(c.score(), 0.0);
    }

    /// Name differs with same value: unmatched on both sides, so one
    /// insertion plus one deletion over (1 slot + 1) = 1.0.
    #[test]
    fn slot_name_mismatch_is_insertion_plus_deletion() {
        let gold = parse("PLAY_SONG", &[("SONG_NAME", "watermelon sugar")]);
        let pred = parse("PLAY_SONG", &[("ARTIST_NAME", "watermelon sugar")]);
        let c = semer(&pred, &gold);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (0, 1, 1));
        assert_eq!(c.score(), 1.0);

        // Oracle: exhaustive matching over the single possible assignment.
        // Pairing the two slots would cost 2 (name and value disagree are
        // unmatchable); leaving both unmatched costs I + D = 2 as well, and
        // the alignment never pairs across names.
    }

    #[test]
    fn intent_mismatch_is_one_substitution() {
        let gold = parse("PLAY_SONG", &[("SONG_NAME", "x")]);
        let pred = parse("PLAY_ALBUM", &[("SONG_NAME", "x")]);
        let c = semer(&pred, &gold);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
        assert_eq!(c.score(), 0.5);
    }

    #[test]
    fn same_name_different_value_is_substitution() {
        let gold = parse("PLAY_SONG", &[("SONG_NAME", "sugar")]);
        let pred = parse("PLAY_SONG", &[("SONG_NAME", "vinegar")]);
        let c = semer(&pred, &gold);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
    }

    #[test]
    fn invalid_prediction_deletes_everything() {
        let gold = parse("PLAY_SONG", &[("A", "x"), ("B", "y")]);
        let outcome = ParseOutcome::Invalid { position: 0, reason: "test".into() };
        let c = semer_outcome(&outcome, &gold);
        assert_eq!((c.substitutions, c.deletions), (1, 2));
        assert_eq!(c.score(), 1.0);
    }

    #[test]
    fn semer_is_nonnegative_and_zero_on_self() {
        let p = parse("A", &[("S", "a b"), ("T", "c")]);
        let q = parse("B", &[("S", "z")]);
        assert_eq!(semer(&p, &p).errors(), 0);
        assert!(semer(&q, &p).score() >= 0.0);
    }

    #[test]
    fn bracket_prf_fixtures() {
        let gold = vec![
            ("IN:A".to_string(), "x y".to_string()),
            ("SL:B".to_string(), "y".to_string()),
        ];
        // Identical, three constituents.
        let mut pred = gold.clone();
        pred.push(("SL:C".to_string(), "z".to_string()));
        let gold3 = pred.clone();
        assert_eq!(bracket_prf(&gold3, &gold3), (1.0, 1.0, 1.0));

        // Two matching plus one spurious: P = 2/3, R = 1, F1 = 0.8.
        let (p, r, f1) = bracket_prf(&pred, &gold);
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r, 1.0);
        assert!((f1 - 0.8).abs() < 1e-12);

        // Disjoint.
        let other = vec![("IN:Z".to_string(), "q".to_string())];
        assert_eq!(bracket_prf(&other, &gold), (0.0, 0.0, 0.0));
    }

    #[test]
    fn prf_swaps_p_and_r_under_pred_gold_swap() {
        let a = vec![("IN:A".to_string(), "x".to_string()), ("SL:B".to_string(), "y".to_string())];
        let b = vec![("IN:A".to_string(), "x".to_string())];
        let (p1, r1, f1a) = bracket_prf(&a, &b);
        let (p2, r2, f1b) = bracket_prf(&b, &a);
        assert_eq!((p1, r1), (r2, p2));
        assert_eq!(f1a, f1b);
    }

    #[test]
    fn hypothesis_em_ignores_sibling_order_but_full_does_not() {
        let gold = parse("PLAY", &[("A", "x"), ("B", "y")]);
        let transcript: Vec<String> =
            "x y".split_whitespace().map(str::to_string).collect();
        let g = GoldRecord::new("u1", gold.clone(), &transcript).unwrap();

        // Same tree with siblings reordered, over a transcript listing y
        // first.
        let reordered = parse("PLAY", &[("B", "y"), ("A", "x")]);
        let atoms = linearize(&reordered, &["y".to_string(), "x".to_string()]).unwrap();
        let pred = PredRecord::from_text("u1", atoms.join(" "));
        assert!(exact_match_hyp(&pred.outcome, &g.parse));
        assert!(!exact_match_full(&pred.text, &g.linearized));
    }

    #[test]
    fn evaluate_corpus_all_perfect_and_single_example_degeneracy() {
        let gold_parse = parse("PLAY_SONG", &[("SONG_NAME", "watermelon sugar")]);
        let transcript: Vec<String> =
            "play the song watermelon sugar".split_whitespace().map(str::to_string).collect();
        let g = GoldRecord::new("u1", gold_parse, &transcript).unwrap();
        let pred = PredRecord::from_text("u1", g.linearized.clone());
        let r = evaluate_corpus(&[pred.clone()], &[g.clone()]).unwrap();
        assert_eq!(r.semer, 0.0);
        assert_eq!(r.em_hyp, 1.0);
        assert_eq!(r.em_full, 1.0);
        assert_eq!(r.hyp_er, 0.0);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.tree_validity, 1.0);

        // Single-example corpus reproduces the per-example semer.
        let per = semer_outcome(&pred.outcome, &g.parse);
        assert_eq!(r.semer, per.score() * (per.gold_slots + 1) as f64 / (r.total_slots + 1) as f64);
    }

    #[test]
    fn id_mismatch_is_an_error() {
        let p = parse("A", &[]);
        let g = GoldRecord::new("u2", p, &["hello".to_string()]).unwrap();
        let pred = PredRecord::from_text("u1", "[IN:A hello ]");
        assert!(matches!(
            evaluate_corpus(&[pred], &[g]),
            Err(MetricsError::IdMismatch { .. })
        ));
    }

    #[test]
    fn em_hyp_bounds_em_full() {
        // A full-sequence match implies a hypothesis match by construction:
        // identical strings delinearize identically.
        let gold_parse = parse("PLAY", &[("A", "x")]);
        let g = GoldRecord::new("u1", gold_parse, &["x".to_string()]).unwrap();
        let exact = PredRecord::from_text("u1", g.linearized.clone());
        let r = evaluate_corpus(&[exact], &[g]).unwrap();
        assert!(r.em_hyp >= r.em_full);
        assert_eq!(r.hyp_er + r.em_hyp, 1.0);
    }
}
