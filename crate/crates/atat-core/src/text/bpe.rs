//! Byte-pair encoding over whitespace-pretokenized words.
//!
//! Merges are learned greedily from pair frequencies with a lexicographic
//! tie-break, so training is reproducible. Special tokens (padding, EOS,
//! UNK, the inter-word space, task labels, and intent/slot tag atoms) hold
//! the low ids and never participate in merges; target words are split,
//! tags are not.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{TargetSequence, TaskKind, TextError};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
/// Inter-word space token. Plain text encodes as word pieces with this id
/// between words, which keeps decode(encode(x)) == x.
pub const SP_ID: u32 = 3;

const PAD_TOKEN: &str = "<pad>";
const EOS_TOKEN: &str = "<eos>";
const UNK_TOKEN: &str = "<unk>";
const SP_TOKEN: &str = "<sp>";
/// What UNK renders as on decode.
const UNK_GLYPH: &str = "\u{FFFD}";

#[derive(Debug, Clone)]
pub struct BpeModel {
    vocab: Vec<String>,
    lookup: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), u32>,
    /// Ids below this are specials: reserved + task labels + tag atoms.
    n_specials: u32,
    chars: BTreeMap<char, u32>,
}

impl BpeModel {
    /// Learn merges from `corpus` until `vocab_size` tokens exist or no pair
    /// repeats. `tasks` and `tag_atoms` become atomic special tokens.
    pub fn train(
        corpus: &[String],
        vocab_size: usize,
        tasks: &[TaskKind],
        tag_atoms: &[String],
    ) -> Result<Self, TextError> {
        assert!(!corpus.is_empty(), "corpus must be non-empty");

        let mut vocab: Vec<String> = vec![
            PAD_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            SP_TOKEN.to_string(),
        ];
        let mut seen: BTreeSet<String> = vocab.iter().cloned().collect();
        for t in tasks {
            let tok = t.bos_token();
            if seen.insert(tok.clone()) {
                vocab.push(tok);
            }
        }
        for tag in tag_atoms {
            check_special(tag)?;
            if seen.insert(tag.clone()) {
                vocab.push(tag.clone());
            }
        }
        let n_specials = vocab.len() as u32;

        // Word frequencies over the lowercased corpus.
        let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
        for line in corpus {
            for word in line.split_whitespace() {
                *word_freq.entry(word.to_lowercase()).or_insert(0) += 1;
            }
        }

        let charset: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
        let minimum = n_specials as usize + charset.len();
        if vocab_size < minimum {
            return Err(TextError::VocabTooSmall { requested: vocab_size, minimum });
        }
        let mut chars = BTreeMap::new();
        for c in &charset {
            chars.insert(*c, vocab.len() as u32);
            vocab.push(c.to_string());
        }

        // Symbol sequences per distinct word, weighted by frequency.
        let mut words: Vec<(Vec<String>, u64)> = word_freq
            .iter()
            .map(|(w, &f)| (w.chars().map(|c| c.to_string()).collect(), f))
            .collect();

        let mut merges: Vec<(String, String)> = Vec::new();
        while vocab.len() < vocab_size {
            let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (syms, f) in &words {
                for win in syms.windows(2) {
                    *pair_counts
                        .entry((win[0].clone(), win[1].clone()))
                        .or_insert(0) += f;
                }
            }
            // Most frequent pair; ties go to the lexicographically smallest,
            // which BTreeMap iteration order hands us for free.
            let best = pair_counts
                .iter()
                .fold(None::<(&(String, String), u64)>, |acc, (p, &c)| match acc {
                    Some((_, bc)) if bc >= c => acc,
                    _ => Some((p, c)),
                });
            let (pair, count) = match best {
                Some((p, c)) if c >= 2 => (p.clone(), c),
                _ => break,
            };
            let _ = count;
            let merged = format!("{}{}", pair.0, pair.1);
            for (syms, _) in &mut words {
                apply_merge(syms, &pair, &merged);
            }
            merges.push(pair);
            vocab.push(merged);
        }

        let lookup = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        Ok(Self { vocab, lookup, merges, merge_rank, n_specials, chars })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_specials(&self) -> u32 {
        self.n_specials
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn bos_id(&self, task: &TaskKind) -> Option<u32> {
        self.id(&task.bos_token())
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < self.n_specials
    }

    /// Register additional atomic special tokens (new tag atoms or task
    /// labels for a new domain). Ids are appended, so existing ids are
    /// stable. Returns the id of each requested atom.
    pub fn extend_specials(&mut self, atoms: &[String]) -> Result<Vec<u32>, TextError> {
        let mut out = Vec::with_capacity(atoms.len());
        for a in atoms {
            check_special(a)?;
            if let Some(&id) = self.lookup.get(a) {
                out.push(id);
                continue;
            }
            let id = self.vocab.len() as u32;
            self.vocab.push(a.clone());
            self.lookup.insert(a.clone(), id);
            out.push(id);
        }
        Ok(out)
    }

    /// Ids past the trained vocabulary: atoms added later by
    /// [`BpeModel::extend_specials`].
    pub fn is_extended_special(&self, id: u32) -> bool {
        id >= self.trained_end()
    }

    /// One past the last id produced by training (specials, chars, merges).
    fn trained_end(&self) -> u32 {
        self.n_specials + self.chars.len() as u32 + self.merges.len() as u32
    }

    /// Encode one word (no whitespace) into piece ids by replaying merges.
    fn encode_word(&self, word: &str) -> Vec<u32> {
        let lower = word.to_lowercase();
        let mut syms: Vec<String> = lower
            .chars()
            .map(|c| {
                if self.chars.contains_key(&c) {
                    c.to_string()
                } else {
                    UNK_TOKEN.to_string()
                }
            })
            .collect();
        loop {
            let mut best: Option<(u32, usize)> = None; // (rank, index)
            for i in 0..syms.len().saturating_sub(1) {
                if syms[i] == UNK_TOKEN || syms[i + 1] == UNK_TOKEN {
                    continue;
                }
                let key = (syms[i].clone(), syms[i + 1].clone());
                if let Some(&r) = self.merge_rank.get(&key) {
                    if best.map_or(true, |(br, _)| r < br) {
                        best = Some((r, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let pair = self.merges[rank as usize].clone();
            let merged = format!("{}{}", pair.0, pair.1);
            apply_merge(&mut syms, &pair, &merged);
        }
        syms.iter()
            .map(|s| if s == UNK_TOKEN { UNK_ID } else { self.lookup[s] })
            .collect()
    }

    /// Encode plain text: words split on whitespace, lowercased, BPE'd, with
    /// the space token between words.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, word) in text.split_whitespace().enumerate() {
            if i > 0 {
                out.push(SP_ID);
            }
            out.extend(self.encode_word(word));
        }
        out
    }

    /// Encode a sequence of atoms. Atoms that exactly match a special token
    /// (tags, task labels) pass through as one id; everything else is
    /// word-encoded. Space ids separate consecutive atoms.
    pub fn encode_atoms(&self, atoms: &[String]) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, atom) in atoms.iter().enumerate() {
            if i > 0 {
                out.push(SP_ID);
            }
            match self.lookup.get(atom.as_str()) {
                Some(&id) if self.is_special(id) || self.is_extended_special(id) => out.push(id),
                _ => out.extend(self.encode_word(atom)),
            }
        }
        out
    }

    /// Build a full decoder target: task BOS, encoded atoms, EOS.
    pub fn encode_target(&self, task: &TaskKind, atoms: &[String]) -> Result<TargetSequence, TextError> {
        let bos = self
            .bos_id(task)
            .ok_or_else(|| TextError::BadToken(format!("task {} has no BOS token", task.name())))?;
        let mut tokens = vec![bos];
        tokens.extend(self.encode_atoms(atoms));
        tokens.push(EOS_ID);
        Ok(TargetSequence { task: task.clone(), tokens })
    }

    /// Decode ids back to text. The space token renders as a space and UNK
    /// as a fixed glyph; other specials render as their names.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TextError> {
        let mut out = String::new();
        for &id in ids {
            match id {
                SP_ID => out.push(' '),
                UNK_ID => out.push_str(UNK_GLYPH),
                _ => {
                    let tok = self
                        .vocab
                        .get(id as usize)
                        .ok_or(TextError::UnknownId(id))?;
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }

    /// Decode a generated target: skip a leading task BOS, stop at EOS,
    /// drop padding.
    pub fn decode_target(&self, ids: &[u32]) -> Result<String, TextError> {
        let mut payload: Vec<u32> = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if i == 0 && id != EOS_ID && id != UNK_ID && id != SP_ID {
                // Task BOS tokens (core or extended) all look like <name>.
                if self.token(id).is_some_and(|t| t.starts_with('<') && t.ends_with('>')) {
                    continue;
                }
            }
            if id == EOS_ID {
                break;
            }
            if id == PAD_ID {
                continue;
            }
            payload.push(id);
        }
        self.decode(&payload)
    }

    /// Versioned text serialization: one header line, merges one pair per
    /// line, then vocab entries as `token<TAB>id` in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "atat-bpe v1 merges={} vocab={} specials={} chars={}",
            self.merges.len(),
            self.vocab.len(),
            self.n_specials,
            self.chars.len()
        );
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        for (i, tok) in self.vocab.iter().enumerate() {
            let _ = writeln!(s, "{tok}\t{i}");
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self, TextError> {
        let mut lines = s.lines();
        let header = lines
            .next()
            .ok_or_else(|| TextError::BadTokenizerFile("empty file".into()))?;
        let mut n_merges = None;
        let mut n_vocab = None;
        let mut n_specials = None;
        let mut n_chars = None;
        for part in header.split_whitespace() {
            if let Some(v) = part.strip_prefix("merges=") {
                n_merges = v.parse::<usize>().ok();
            } else if let Some(v) = part.strip_prefix("vocab=") {
                n_vocab = v.parse::<usize>().ok();
            } else if let Some(v) = part.strip_prefix("specials=") {
                n_specials = v.parse::<u32>().ok();
            } else if let Some(v) = part.strip_prefix("chars=") {
                n_chars = v.parse::<usize>().ok();
            }
        }
        if !header.starts_with("atat-bpe v1") {
            return Err(TextError::BadTokenizerFile(format!("bad header '{header}'")));
        }
        let (n_merges, n_vocab, n_specials, n_chars) = match (n_merges, n_vocab, n_specials, n_chars)
        {
            (Some(m), Some(v), Some(s), Some(c)) => (m, v, s, c),
            _ => return Err(TextError::BadTokenizerFile("header missing counts".into())),
        };
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines
                .next()
                .ok_or_else(|| TextError::BadTokenizerFile("missing merge line".into()))?;
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| TextError::BadTokenizerFile(format!("bad merge line '{line}'")))?;
            merges.push((a.to_string(), b.to_string()));
        }
        let mut vocab = vec![String::new(); n_vocab];
        for _ in 0..n_vocab {
            let line = lines
                .next()
                .ok_or_else(|| TextError::BadTokenizerFile("missing vocab line".into()))?;
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| TextError::BadTokenizerFile(format!("bad vocab line '{line}'")))?;
            let id: usize = id
                .parse()
                .map_err(|_| TextError::BadTokenizerFile(format!("bad id in '{line}'")))?;
            if id >= n_vocab {
                return Err(TextError::BadTokenizerFile(format!("id {id} out of range")));
            }
            vocab[id] = tok.to_string();
        }
        let lookup: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, p): (usize, &(String, String))| (p.clone(), i as u32))
            .collect();
        // The char block sits right after the specials.
        let mut chars = BTreeMap::new();
        for i in n_specials as usize..n_specials as usize + n_chars {
            let tok = vocab
                .get(i)
                .ok_or_else(|| TextError::BadTokenizerFile("char block out of range".into()))?;
            let mut it = tok.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.insert(c, i as u32),
                _ => {
                    return Err(TextError::BadTokenizerFile(format!(
                        "expected single-char token at id {i}, got '{tok}'"
                    )))
                }
            };
        }
        Ok(Self { vocab, lookup, merges, merge_rank, n_specials, chars })
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        fs::write(path, self.to_file_string())
            .map_err(|e| TextError::BadTokenizerFile(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let s = fs::read_to_string(path).map_err(|e| TextError::BadTokenizerFile(e.to_string()))?;
        Self::from_file_string(&s)
    }
}

fn check_special(tok: &str) -> Result<(), TextError> {
    if tok.is_empty() || tok.chars().any(char::is_whitespace) {
        return Err(TextError::BadToken(format!("special token '{tok}' must be non-empty, no whitespace")));
    }
    Ok(())
}

/// Left-to-right non-overlapping replacement of `pair` with `merged`.
fn apply_merge(syms: &mut Vec<String>, pair: &(String, String), merged: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == pair.0 && syms[i + 1] == pair.1 {
            syms[i] = merged.to_string();
            syms.remove(i + 1);
        }
        i += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn core_tasks() -> Vec<TaskKind> {
        vec![TaskKind::Slu, TaskKind::Asr, TaskKind::Mlm, TaskKind::Nlu]
    }

    #[test]
    fn two_merges_on_aaaa_collapse_to_one_token() {
        // specials: 4 reserved + 4 tasks = 8; chars: {a}; two merges -> 11.
        let m = BpeModel::train(&["aaaa".into()], 11, &core_tasks(), &[]).unwrap();
        assert_eq!(
            m.merges,
            vec![("a".to_string(), "a".to_string()), ("aa".to_string(), "aa".to_string())]
        );
        assert_eq!(m.encode_text("aaaa").len(), 1);
    }

    #[test]
    fn vocab_size_at_base_means_character_level() {
        let m = BpeModel::train(&["abc abd".into()], 8 + 4, &core_tasks(), &[]).unwrap();
        assert!(m.merges.is_empty());
        assert_eq!(m.encode_text("abc").len(), 3);
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        let err = BpeModel::train(&["abc".into()], 5, &core_tasks(), &[]).unwrap_err();
        assert!(matches!(err, TextError::VocabTooSmall { .. }));
    }

    #[test]
    fn round_trip_sentence() {
        let corpus = vec!["play the song watermelon sugar".to_string()];
        let m = BpeModel::train(&corpus, 60, &core_tasks(), &[]).unwrap();
        let text = "play the song watermelon sugar";
        assert_eq!(m.decode(&m.encode_text(text)).unwrap(), text);
    }

    #[test]
    fn unknown_char_becomes_unk_glyph() {
        let m = BpeModel::train(&["abc".into()], 20, &core_tasks(), &[]).unwrap();
        let ids = m.encode_text("azb");
        assert!(ids.contains(&UNK_ID));
        assert_eq!(m.decode(&ids).unwrap(), "a\u{FFFD}b");
    }

    #[test]
    fn tag_atoms_are_never_split() {
        let tags = vec!["[IN:PLAY_SONG".to_string(), "[SL:SONG_NAME".to_string(), "]".to_string()];
        let m = BpeModel::train(&["play song".into()], 40, &core_tasks(), &tags).unwrap();
        let ids = m.encode_atoms(&["[SL:SONG_NAME".to_string()]);
        assert_eq!(ids.len(), 1);
        assert!(m.is_special(ids[0]));
    }

    #[test]
    fn target_carries_task_bos_and_eos() {
        let m = BpeModel::train(&["stop".into()], 20, &core_tasks(), &[]).unwrap();
        let t = m.encode_target(&TaskKind::Asr, &["stop".to_string()]).unwrap();
        assert_eq!(t.tokens[0], m.bos_id(&TaskKind::Asr).unwrap());
        assert_eq!(*t.tokens.last().unwrap(), EOS_ID);
        assert_eq!(m.decode_target(&t.tokens).unwrap(), "stop");
    }

    #[test]
    fn extend_specials_appends_dense_stable_ids() {
        let mut m = BpeModel::train(&["read a book".into()], 40, &core_tasks(), &[]).unwrap();
        let before = m.vocab_size() as u32;
        let ids = m.extend_specials(&["[IN:READ_BOOK".to_string(), "]".to_string()]).unwrap();
        assert_eq!(ids, vec![before, before + 1]);
        // Extending again with the same atom is id-stable.
        let again = m.extend_specials(&["[IN:READ_BOOK".to_string()]).unwrap();
        assert_eq!(again, vec![before]);
        assert_eq!(m.encode_atoms(&["[IN:READ_BOOK".to_string()]), vec![before]);
    }

    #[test]
    fn file_round_trip_preserves_behavior() {
        let corpus =
            vec!["play the song watermelon sugar".to_string(), "stop the music now".to_string()];
        let tags = vec!["[IN:PLAY_SONG".to_string(), "]".to_string()];
        let m = BpeModel::train(&corpus, 70, &core_tasks(), &tags).unwrap();
        let s = m.to_file_string();
        let m2 = BpeModel::from_file_string(&s).unwrap();
        assert_eq!(m.vocab, m2.vocab);
        assert_eq!(m.merges, m2.merges);
        let text = "play the watermelon now";
        assert_eq!(m.encode_text(text), m2.encode_text(text));
        assert_eq!(s, m2.to_file_string());
    }

    #[test]
    fn decode_of_out_of_range_id_fails() {
        let m = BpeModel::train(&["ab".into()], 20, &core_tasks(), &[]).unwrap();
        assert!(matches!(m.decode(&[9999]), Err(TextError::UnknownId(9999))));
    }

    proptest! {
        /// decode(encode(x)) == x for any text over the training charset.
        #[test]
        fn encode_decode_round_trip(words in proptest::collection::vec("[a-h]{1,8}", 1..8)) {
            let corpus = vec!["abcdefgh hgfedcba abab cdcd".to_string()];
            let m = BpeModel::train(&corpus, 60, &core_tasks(), &[]).unwrap();
            let text = words.join(" ");
            prop_assert_eq!(m.decode(&m.encode_text(&text)).unwrap(), text);
        }
    }
}
