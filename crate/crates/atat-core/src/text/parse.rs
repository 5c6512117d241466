//! Semantic parses (intent + slots, possibly nested) and their linearized
//! bracket form:
//!
//! ```text
//! [IN:PLAY_SONG play the song [SL:SONG_NAME watermelon sugar ] ]
//! ```
//!
//! Carrier words (transcript tokens outside any slot) appear between the
//! brackets in transcript order; a slot holds either a contiguous word span
//! or one nested intent tree.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use super::TextError;

/// An intent with its ordered slots. Carrier words are not stored here;
/// they come from the transcript at linearization time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticParse {
    pub intent: String,
    pub children: Vec<SlotChild>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotChild {
    pub slot: String,
    pub value: SlotValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotValue {
    /// A contiguous span of transcript words.
    Words(Vec<String>),
    /// A nested intent. Its yield spans from its first to its last leaf
    /// word; nested intents carry no leading or trailing carrier words.
    Nested(Box<SemanticParse>),
}

impl SlotValue {
    /// Leaf words of this value in transcript order.
    pub fn yield_words(&self) -> Vec<String> {
        match self {
            SlotValue::Words(ws) => ws.clone(),
            SlotValue::Nested(p) => p.leaf_words(),
        }
    }
}

impl SemanticParse {
    pub fn new(intent: impl Into<String>) -> Self {
        Self { intent: intent.into(), children: Vec::new() }
    }

    pub fn with_slot(mut self, slot: impl Into<String>, words: &[&str]) -> Self {
        self.children.push(SlotChild {
            slot: slot.into(),
            value: SlotValue::Words(words.iter().map(|w| w.to_string()).collect()),
        });
        self
    }

    pub fn with_nested(mut self, slot: impl Into<String>, nested: SemanticParse) -> Self {
        self.children
            .push(SlotChild { slot: slot.into(), value: SlotValue::Nested(Box::new(nested)) });
        self
    }

    /// All leaf words of the slots, in order. Carrier words are not
    /// included (they live in the transcript).
    pub fn leaf_words(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.children {
            out.extend(c.value.yield_words());
        }
        out
    }

    /// Flatten to (slot-name, yield-string) pairs over all slot nodes,
    /// nested ones included.
    pub fn flat_slots(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        self.collect_slots(&mut out);
        out
    }

    fn collect_slots(&self, out: &mut Vec<(String, String)>) {
        for c in &self.children {
            out.push((c.slot.clone(), c.value.yield_words().join(" ")));
            if let SlotValue::Nested(p) = &c.value {
                p.collect_slots(out);
            }
        }
    }

    /// Tree equality that ignores the order of sibling slots.
    pub fn tree_eq_unordered(&self, other: &SemanticParse) -> bool {
        self.canonical_key() == other.canonical_key()
    }

    fn canonical_key(&self) -> String {
        let mut keys: Vec<String> = self
            .children
            .iter()
            .map(|c| match &c.value {
                SlotValue::Words(ws) => format!("w|{}|{}", c.slot, ws.join(" ")),
                SlotValue::Nested(p) => format!("n|{}|{}", c.slot, p.canonical_key()),
            })
            .collect();
        keys.sort();
        format!("[{}:{}]", self.intent, keys.join(","))
    }
}

// JSON interchange: {intent, children: [{slot, value: string | parse}]}.
impl Serialize for SemanticParse {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = ser.serialize_map(Some(2))?;
        map.serialize_entry("intent", &self.intent)?;
        let children: Vec<Value> = self
            .children
            .iter()
            .map(|c| {
                let value = match &c.value {
                    SlotValue::Words(ws) => Value::String(ws.join(" ")),
                    SlotValue::Nested(p) => serde_json::to_value(p.as_ref()).expect("parse json"),
                };
                serde_json::json!({ "slot": c.slot, "value": value })
            })
            .collect();
        map.serialize_entry("children", &children)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for SemanticParse {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(de)?;
        parse_from_value(&v).map_err(D::Error::custom)
    }
}

fn parse_from_value(v: &Value) -> Result<SemanticParse, String> {
    let obj = v.as_object().ok_or("parse must be an object")?;
    let intent = obj
        .get("intent")
        .and_then(Value::as_str)
        .ok_or("parse needs a string 'intent'")?
        .to_string();
    if intent.is_empty() {
        return Err("intent must be non-empty".into());
    }
    let mut children = Vec::new();
    if let Some(arr) = obj.get("children") {
        for c in arr.as_array().ok_or("'children' must be an array")? {
            let cobj = c.as_object().ok_or("child must be an object")?;
            let slot = cobj
                .get("slot")
                .and_then(Value::as_str)
                .ok_or("child needs a string 'slot'")?
                .to_string();
            let value = match cobj.get("value").ok_or("child needs a 'value'")? {
                Value::String(s) => {
                    let words: Vec<String> = s.split_whitespace().map(str::to_string).collect();
                    if words.is_empty() {
                        return Err(format!("slot '{slot}' has an empty value"));
                    }
                    SlotValue::Words(words)
                }
                nested @ Value::Object(_) => {
                    SlotValue::Nested(Box::new(parse_from_value(nested)?))
                }
                _ => return Err(format!("slot '{slot}' value must be string or parse")),
            };
            children.push(SlotChild { slot, value });
        }
    }
    Ok(SemanticParse { intent, children })
}

/// Linearize a parse over its transcript into the canonical bracket atoms.
/// Slot values are matched against the transcript left to right; unmatched
/// or out-of-order values are an error.
pub fn linearize(p: &SemanticParse, transcript_tokens: &[String]) -> Result<Vec<String>, TextError> {
    let mut out = Vec::new();
    lin_rec(p, transcript_tokens, &mut out)?;
    Ok(out)
}

fn lin_rec(p: &SemanticParse, words: &[String], out: &mut Vec<String>) -> Result<(), TextError> {
    out.push(format!("[IN:{}", p.intent));
    let mut pos = 0usize;
    for child in &p.children {
        let span = child.value.yield_words();
        let at = find_span(words, pos, &span).ok_or_else(|| {
            TextError::SpanOutOfOrder(format!(
                "slot '{}' value '{}' not found in transcript order",
                child.slot,
                span.join(" ")
            ))
        })?;
        // Carrier words before the slot.
        for w in &words[pos..at] {
            out.push(w.clone());
        }
        out.push(format!("[SL:{}", child.slot));
        match &child.value {
            SlotValue::Words(ws) => out.extend(ws.iter().cloned()),
            SlotValue::Nested(q) => lin_rec(q, &words[at..at + span.len()], out)?,
        }
        out.push("]".to_string());
        pos = at + span.len();
    }
    // Trailing carrier words.
    for w in &words[pos..] {
        out.push(w.clone());
    }
    out.push("]".to_string());
    Ok(())
}

fn find_span(words: &[String], from: usize, span: &[String]) -> Option<usize> {
    if span.is_empty() || from + span.len() > words.len() {
        return None;
    }
    (from..=words.len() - span.len()).find(|&i| words[i..i + span.len()] == *span)
}

/// A well-formed decoded hypothesis: the parse tree plus the labeled
/// constituents (label, yield) of every intent/slot node, for bracket
/// scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedHypothesis {
    pub parse: SemanticParse,
    pub constituents: Vec<(String, String)>,
}

/// Outcome of delinearizing a decoded sequence: the validity flag and, when
/// valid, the parse.
#[derive(Debug, Clone, PartialEq)]
pub enum ParseOutcome {
    Valid(ParsedHypothesis),
    Invalid { position: usize, reason: String },
}

impl ParseOutcome {
    pub fn is_valid(&self) -> bool {
        matches!(self, ParseOutcome::Valid(_))
    }

    pub fn hypothesis(&self) -> Option<&ParsedHypothesis> {
        match self {
            ParseOutcome::Valid(h) => Some(h),
            ParseOutcome::Invalid { .. } => None,
        }
    }
}

/// Parse bracket atoms back into a tree; inverse of [`linearize`] on its
/// image. Errors carry the first offending atom position.
pub fn delinearize(atoms: &[String]) -> Result<ParsedHypothesis, TextError> {
    let mut constituents = Vec::new();
    let mut pos = 0usize;
    let parse = parse_intent(atoms, &mut pos, &mut constituents)?;
    if pos != atoms.len() {
        return Err(TextError::TreeInvalid {
            position: pos,
            reason: "trailing atoms after the root closes".into(),
        });
    }
    Ok(ParsedHypothesis { parse, constituents })
}

/// Non-failing wrapper used by metrics.
pub fn delinearize_outcome(atoms: &[String]) -> ParseOutcome {
    match delinearize(atoms) {
        Ok(h) => ParseOutcome::Valid(h),
        Err(TextError::TreeInvalid { position, reason }) => {
            ParseOutcome::Invalid { position, reason }
        }
        Err(e) => ParseOutcome::Invalid { position: 0, reason: e.to_string() },
    }
}

fn invalid<T>(position: usize, reason: impl Into<String>) -> Result<T, TextError> {
    Err(TextError::TreeInvalid { position, reason: reason.into() })
}

fn parse_intent(
    atoms: &[String],
    pos: &mut usize,
    constituents: &mut Vec<(String, String)>,
) -> Result<SemanticParse, TextError> {
    let open_at = *pos;
    let label = match atoms.get(*pos) {
        Some(a) if a.starts_with("[IN:") => a["[IN:".len()..].to_string(),
        Some(a) if a.starts_with("[SL:") => {
            return invalid(*pos, "slot bracket where an intent is required")
        }
        Some(a) => return invalid(*pos, format!("expected [IN:..., got '{a}'")),
        None => return invalid(*pos, "expected [IN:..., got end of sequence"),
    };
    if label.is_empty() {
        return invalid(*pos, "empty intent label");
    }
    *pos += 1;

    let mut children = Vec::new();
    let mut yield_words: Vec<String> = Vec::new();
    let mut any_content = false;
    loop {
        match atoms.get(*pos) {
            Some(a) if a == "]" => {
                *pos += 1;
                break;
            }
            Some(a) if a.starts_with("[SL:") => {
                let (child, child_yield) = parse_slot(atoms, pos, constituents)?;
                children.push(child);
                yield_words.extend(child_yield);
                any_content = true;
            }
            Some(a) if a.starts_with("[IN:") => {
                return invalid(*pos, "intent directly inside an intent (must be under a slot)")
            }
            Some(a) => {
                yield_words.push(a.clone());
                any_content = true;
                *pos += 1;
            }
            None => return invalid(*pos, "unbalanced brackets: intent never closes"),
        }
    }
    if !any_content {
        return invalid(open_at, format!("empty constituent [IN:{label}"));
    }
    constituents.push((format!("IN:{label}"), yield_words.join(" ")));
    Ok(SemanticParse { intent: label, children })
}

fn parse_slot(
    atoms: &[String],
    pos: &mut usize,
    constituents: &mut Vec<(String, String)>,
) -> Result<(SlotChild, Vec<String>), TextError> {
    let open_at = *pos;
    let label = atoms[*pos]["[SL:".len()..].to_string();
    if label.is_empty() {
        return invalid(*pos, "empty slot label");
    }
    *pos += 1;

    let mut words: Vec<String> = Vec::new();
    let mut nested: Option<SemanticParse> = None;
    loop {
        match atoms.get(*pos) {
            Some(a) if a == "]" => {
                *pos += 1;
                break;
            }
            Some(a) if a.starts_with("[IN:") => {
                if nested.is_some() {
                    return invalid(*pos, "multiple intents inside one slot");
                }
                if !words.is_empty() {
                    return invalid(*pos, "slot mixes words and a nested intent");
                }
                nested = Some(parse_intent(atoms, pos, constituents)?);
            }
            Some(a) if a.starts_with("[SL:") => {
                return invalid(*pos, "slot directly inside a slot")
            }
            Some(a) => {
                if nested.is_some() {
                    return invalid(*pos, "slot mixes a nested intent and words");
                }
                words.push(a.clone());
                *pos += 1;
            }
            None => return invalid(*pos, "unbalanced brackets: slot never closes"),
        }
    }

    let value = match nested {
        Some(p) => SlotValue::Nested(Box::new(p)),
        None if words.is_empty() => return invalid(open_at, format!("empty constituent [SL:{label}")),
        None => SlotValue::Words(words),
    };
    let child = SlotChild { slot: label.clone(), value };
    let child_yield = child.value.yield_words();
    constituents.push((format!("SL:{label}"), child_yield.join(" ")));
    Ok((child, child_yield))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn flat_parse_linearizes_to_the_bracket_form() {
        let p = SemanticParse::new("PLAY_SONG").with_slot("SONG_NAME", &["watermelon", "sugar"]);
        let atoms = linearize(&p, &toks("play the song watermelon sugar")).unwrap();
        assert_eq!(
            atoms.join(" "),
            "[IN:PLAY_SONG play the song [SL:SONG_NAME watermelon sugar ] ]"
        );
    }

    #[test]
    fn slotless_intent() {
        let p = SemanticParse::new("STOP");
        let atoms = linearize(&p, &toks("stop")).unwrap();
        assert_eq!(atoms.join(" "), "[IN:STOP stop ]");
    }

    #[test]
    fn nested_parse_round_trips() {
        let inner = SemanticParse::new("GET_EVENT").with_slot("EVENT_NAME", &["jazz", "night"]);
        let p = SemanticParse::new("GET_DIRECTIONS").with_nested("DESTINATION", inner);
        let atoms = linearize(&p, &toks("directions to jazz night")).unwrap();
        assert_eq!(
            atoms.join(" "),
            "[IN:GET_DIRECTIONS directions to [SL:DESTINATION [IN:GET_EVENT [SL:EVENT_NAME jazz night ] ] ] ]"
        );
        let back = delinearize(&atoms).unwrap();
        assert_eq!(back.parse, p);
    }

    #[test]
    fn linearized_length_is_words_plus_two_per_constituent() {
        let p = SemanticParse::new("PLAY_SONG").with_slot("SONG_NAME", &["watermelon", "sugar"]);
        let t = toks("play the song watermelon sugar");
        let atoms = linearize(&p, &t).unwrap();
        assert_eq!(atoms.len(), t.len() + 2 * 2);
    }

    #[test]
    fn round_trip_equality_flat() {
        let p = SemanticParse::new("PLAY_SONG")
            .with_slot("SONG_NAME", &["watermelon", "sugar"])
            .with_slot("ARTIST_NAME", &["harry"]);
        let atoms = linearize(&p, &toks("play watermelon sugar by harry now")).unwrap();
        let back = delinearize(&atoms).unwrap();
        assert_eq!(back.parse, p);
    }

    #[test]
    fn missing_close_is_invalid() {
        let atoms = toks("[IN:PLAY_SONG [SL:SONG_NAME x");
        let err = delinearize(&atoms).unwrap_err();
        assert!(matches!(err, TextError::TreeInvalid { .. }));
    }

    #[test]
    fn top_level_slot_is_invalid() {
        let atoms = toks("[SL:SONG_NAME x ]");
        let err = delinearize(&atoms).unwrap_err();
        match err {
            TextError::TreeInvalid { position, .. } => assert_eq!(position, 0),
            other => panic!("expected TreeInvalid, got {other:?}"),
        }
    }

    #[test]
    fn empty_constituent_is_invalid() {
        assert!(delinearize(&toks("[IN:STOP ]")).is_err());
        assert!(delinearize(&toks("[IN:PLAY [SL:SONG ] x ]")).is_err());
    }

    #[test]
    fn trailing_atoms_are_invalid() {
        let atoms = toks("[IN:STOP stop ] extra");
        let err = delinearize(&atoms).unwrap_err();
        match err {
            TextError::TreeInvalid { position, .. } => assert_eq!(position, 4),
            other => panic!("expected TreeInvalid, got {other:?}"),
        }
    }

    #[test]
    fn out_of_order_span_is_an_error() {
        let p = SemanticParse::new("PLAY_SONG")
            .with_slot("ARTIST_NAME", &["harry"])
            .with_slot("SONG_NAME", &["watermelon"]);
        // Transcript has watermelon before harry, but children claim the
        // opposite order.
        let err = linearize(&p, &toks("play watermelon by harry")).unwrap_err();
        assert!(matches!(err, TextError::SpanOutOfOrder(_)));
    }

    #[test]
    fn sibling_order_insensitive_equality() {
        let a = SemanticParse::new("PLAY")
            .with_slot("A", &["x"])
            .with_slot("B", &["y"]);
        let b = SemanticParse::new("PLAY")
            .with_slot("B", &["y"])
            .with_slot("A", &["x"]);
        assert!(a.tree_eq_unordered(&b));
        assert_ne!(a, b);
    }

    #[test]
    fn json_interchange_round_trip() {
        let inner = SemanticParse::new("GET_EVENT").with_slot("EVENT_NAME", &["jazz"]);
        let p = SemanticParse::new("GET_DIRECTIONS")
            .with_slot("MODE", &["walking"])
            .with_nested("DESTINATION", inner);
        let json = serde_json::to_string(&p).unwrap();
        let back: SemanticParse = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        // Flat values serialize as plain strings.
        assert!(json.contains("\"value\":\"walking\""));
    }

    #[test]
    fn constituents_carry_label_and_yield() {
        let p = SemanticParse::new("PLAY_SONG").with_slot("SONG_NAME", &["watermelon", "sugar"]);
        let atoms = linearize(&p, &toks("play the song watermelon sugar")).unwrap();
        let h = delinearize(&atoms).unwrap();
        assert!(h
            .constituents
            .contains(&("SL:SONG_NAME".to_string(), "watermelon sugar".to_string())));
        assert!(h
            .constituents
            .contains(&("IN:PLAY_SONG".to_string(), "play the song watermelon sugar".to_string())));
    }
}
