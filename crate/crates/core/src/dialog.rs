//! Dialog corpus model, context assembly, KB-token annotation and attribute
//! pseudo-labels.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::kb::{AttrMask, AttributeSchema, Entity, EntityId, KnowledgeBase};
use crate::text;

pub const USER_MARKER: &str = "[usr]";
pub const SYSTEM_MARKER: &str = "[sys]";

/// Half-open token range `[start, end)` inside a response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos)
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

mod as_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(tokens: &[String], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&tokens.join(" "))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
        let raw = String::deserialize(d)?;
        Ok(crate::text::tokenize(&raw))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTurn {
    #[serde(with = "as_text")]
    pub user: Vec<String>,
    #[serde(with = "as_text")]
    pub response: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_entity_ids: Option<Vec<EntityId>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kb_token_spans: Vec<Span>,
}

impl DialogTurn {
    pub fn new(user: &str, response: &str) -> Self {
        Self {
            user: text::tokenize(user),
            response: text::tokenize(response),
            gold_entity_ids: None,
            kb_token_spans: Vec::new(),
        }
    }

    /// M: number of response tokens covered by KB spans.
    pub fn kb_token_count(&self) -> usize {
        self.kb_token_spans.iter().map(Span::len).sum()
    }

    /// Response positions inside KB spans, ascending.
    pub fn kb_positions(&self) -> Vec<usize> {
        self.kb_token_spans
            .iter()
            .flat_map(|s| s.start..s.end)
            .collect()
    }

    pub fn validate_spans(&self) -> Result<()> {
        let mut sorted = self.kb_token_spans.clone();
        sorted.sort();
        for (i, s) in sorted.iter().enumerate() {
            if s.is_empty() || s.end > self.response.len() {
                return Err(Error::Validation(format!("span {s:?} out of bounds")));
            }
            if i > 0 && sorted[i - 1].end > s.start {
                return Err(Error::Validation(format!("span {s:?} overlaps")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Dialog {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub turns: Vec<DialogTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default)]
    pub condensed_entity_ids: Vec<EntityId>,
    /// User-goal constraints when known (synthetic corpora record them).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub goal: BTreeMap<String, String>,
}

pub fn load_dialogs(path: impl AsRef<Path>) -> Result<Vec<Dialog>> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_dialogs(&src)
}

/// Dialog file contents; a bad record is reported by index.
pub fn parse_dialogs(src: &str) -> Result<Vec<Dialog>> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(src)?;
    raw.into_iter()
        .enumerate()
        .map(|(index, v)| {
            serde_json::from_value(v).map_err(|e| Error::Parse {
                index,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn save_dialogs(path: impl AsRef<Path>, dialogs: &[Dialog]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(dialogs)?;
    std::fs::write(path, text).map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    System,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogContext {
    pub turns: Vec<(Speaker, Vec<String>)>,
    /// Marker-prefixed utterances, front-truncated to the length budget.
    pub flattened: Vec<String>,
}

/// `C_t = {U_1, R_1, …, U_t}` for a 1-based turn index, keeping the newest
/// `max_len` tokens.
pub fn build_context(dialog: &Dialog, t: usize, max_len: usize) -> Result<DialogContext> {
    if t == 0 || t > dialog.turns.len() {
        return Err(Error::TurnIndex {
            t,
            len: dialog.turns.len(),
        });
    }
    let mut turns = Vec::with_capacity(2 * t - 1);
    for (i, turn) in dialog.turns[..t].iter().enumerate() {
        turns.push((Speaker::User, turn.user.clone()));
        if i + 1 < t {
            turns.push((Speaker::System, turn.response.clone()));
        }
    }
    let mut flattened = Vec::new();
    for (speaker, toks) in &turns {
        flattened.push(
            match speaker {
                Speaker::User => USER_MARKER,
                Speaker::System => SYSTEM_MARKER,
            }
            .to_string(),
        );
        flattened.extend(toks.iter().cloned());
    }
    if flattened.len() > max_len {
        flattened.drain(..flattened.len() - max_len);
    }
    Ok(DialogContext { turns, flattened })
}

/// All attribute values of a KB as token runs, for longest-match lookup.
#[derive(Clone, Debug, Default)]
pub struct ValueLexicon {
    by_first: HashMap<String, Vec<Vec<String>>>,
}

impl ValueLexicon {
    pub fn from_kb(kb: &KnowledgeBase) -> Self {
        let mut uniq: BTreeSet<Vec<String>> = BTreeSet::new();
        for e in kb.entities() {
            for v in e.values.values() {
                let toks = text::tokenize(v);
                if !toks.is_empty() {
                    uniq.insert(toks);
                }
            }
        }
        let mut by_first: HashMap<String, Vec<Vec<String>>> = HashMap::new();
        for toks in uniq {
            by_first.entry(toks[0].clone()).or_default().push(toks);
        }
        for runs in by_first.values_mut() {
            runs.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        }
        Self { by_first }
    }

    /// Greedy left-to-right longest-match spans.
    pub fn spans<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<Span> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let found = self.by_first.get(tokens[i].as_ref()).and_then(|runs| {
                runs.iter().find(|run| {
                    i + run.len() <= tokens.len()
                        && run.iter().zip(&tokens[i..]).all(|(a, b)| a == b.as_ref())
                })
            });
            match found {
                Some(run) => {
                    spans.push(Span {
                        start: i,
                        end: i + run.len(),
                    });
                    i += run.len();
                }
                None => i += 1,
            }
        }
        spans
    }

    /// Distinct matched values in metric form.
    pub fn values_in<S: AsRef<str>>(&self, tokens: &[S]) -> BTreeSet<String> {
        self.spans(tokens)
            .into_iter()
            .map(|s| {
                tokens[s.start..s.end]
                    .iter()
                    .map(AsRef::as_ref)
                    .collect::<Vec<_>>()
                    .join("_")
            })
            .collect()
    }
}

/// Marks every maximal response run matching a KB value.
pub fn annotate_kb_tokens(turn: &DialogTurn, kb: &KnowledgeBase) -> DialogTurn {
    annotate_with(turn, &ValueLexicon::from_kb(kb))
}

pub fn annotate_with(turn: &DialogTurn, lexicon: &ValueLexicon) -> DialogTurn {
    let mut out = turn.clone();
    out.kb_token_spans = lexicon.spans(&turn.response);
    out
}

/// An entity after attribute clipping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClippedEntity {
    pub entity: Entity,
    pub mask: AttrMask,
}

impl ClippedEntity {
    pub fn unclipped(entity: Entity, n: usize) -> Self {
        Self {
            entity,
            mask: AttrMask::all(n),
        }
    }
}

/// `b_t`: 0/1 per attribute, aligned with schema order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelVector {
    pub bits: Vec<u8>,
}

impl PseudoLabelVector {
    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// `b_t[j] = 1` iff some retrieved entity's value for attribute `j` occurs in
/// the context or the response. Masks do not suppress labels, so an attribute
/// clipped on this turn can still be learned as relevant.
pub fn build_pseudo_labels<S: AsRef<str>>(
    context: &[S],
    response: &[S],
    clipped: &[ClippedEntity],
    schema: &AttributeSchema,
) -> PseudoLabelVector {
    let mut bits = vec![0u8; schema.len()];
    for (j, name) in schema.names().iter().enumerate() {
        'entities: for c in clipped {
            if let Some(v) = c.entity.value(name) {
                let run = text::tokenize(v);
                if text::contains_run(context, &run) || text::contains_run(response, &run) {
                    bits[j] = 1;
                    break 'entities;
                }
            }
        }
    }
    PseudoLabelVector { bits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::KnowledgeBase;
    use proptest::prelude::*;

    fn kb() -> KnowledgeBase {
        KnowledgeBase::from_json_str(
            r#"[{"id": 0, "domain": "restaurant", "name": "pizza hut", "area": "south", "postcode": "cb21ab"},
                {"id": 1, "domain": "restaurant", "name": "pizza express", "area": "centre", "postcode": "cb23rh"}]"#,
        )
        .unwrap()
    }

    fn three_turns() -> Dialog {
        Dialog {
            turns: vec![
                DialogTurn::new("u one", "r one"),
                DialogTurn::new("u two", "r two"),
                DialogTurn::new("u three", "r three"),
            ],
            ..Default::default()
        }
    }

    #[test]
    fn context_interleaves_turns() {
        let d = three_turns();
        let c1 = build_context(&d, 1, 200).unwrap();
        assert_eq!(c1.flattened.join(" "), "[usr] u one");
        let c2 = build_context(&d, 2, 200).unwrap();
        assert_eq!(c2.flattened.join(" "), "[usr] u one [sys] r one [usr] u two");
        assert_eq!(c2.turns.len(), 3);
        assert!(matches!(build_context(&d, 4, 10), Err(Error::TurnIndex { .. })));
        assert!(matches!(build_context(&d, 0, 10), Err(Error::TurnIndex { .. })));
    }

    #[test]
    fn context_truncates_from_the_front() {
        let long: String = (0..499).map(|i| format!("w{i} ")).collect();
        let d = Dialog {
            turns: vec![DialogTurn::new(&long, "ok")],
            ..Default::default()
        };
        let c = build_context(&d, 1, 200).unwrap();
        assert_eq!(c.flattened.len(), 200);
        assert_eq!(c.flattened.last().unwrap(), "w498");
        assert_eq!(c.flattened[0], "w299");
    }

    #[test]
    fn context_prefix_extension() {
        let d = three_turns();
        for t in 2..=3 {
            let prev = build_context(&d, t - 1, usize::MAX).unwrap().flattened;
            let cur = build_context(&d, t, usize::MAX).unwrap().flattened;
            assert_eq!(&cur[..prev.len()], &prev[..]);
        }
    }

    #[test]
    fn annotation_examples() {
        let kb = kb();
        let t = annotate_kb_tokens(&DialogTurn::new("hi", "pizza hut is in the south"), &kb);
        assert_eq!(t.kb_token_spans, vec![Span { start: 0, end: 2 }, Span { start: 5, end: 6 }]);
        let t = annotate_kb_tokens(&DialogTurn::new("hi", "pizza hut is nice"), &kb);
        assert_eq!(t.kb_token_count(), 2);
        let t = annotate_kb_tokens(&DialogTurn::new("hi", "hello there"), &kb);
        assert_eq!(t.kb_token_count(), 0);
        let t = annotate_kb_tokens(&DialogTurn::new("hi", "try pizza hut , postcode cb21ab"), &kb);
        assert_eq!(t.kb_token_spans.len(), 2);
        assert_eq!(t.kb_token_count(), 3);
    }

    #[test]
    fn pseudo_label_examples() {
        let kb = kb();
        let e = ClippedEntity::unclipped(kb.entity(0).clone(), 3);
        let ctx = text::tokenize("[usr] a place please");
        let resp = text::tokenize("it is in the south");
        let b = build_pseudo_labels(&ctx, &resp, std::slice::from_ref(&e), &kb.schema);
        assert_eq!(b.bits, vec![0, 1, 0]);
        assert_eq!(build_pseudo_labels(&ctx, &resp, &[], &kb.schema).bits, vec![0, 0, 0]);
        let masked = ClippedEntity {
            mask: AttrMask::from_names(&kb.schema, &["name"]),
            ..e
        };
        assert_eq!(build_pseudo_labels(&ctx, &resp, &[masked], &kb.schema).bits, vec![0, 1, 0]);
    }

    proptest! {
        #[test]
        fn pseudo_labels_are_monotone(extra in 0usize..2, words in proptest::collection::vec(0usize..6, 0..10)) {
            let kb = kb();
            let vocab = ["pizza", "hut", "south", "centre", "cb23rh", "the"];
            let resp: Vec<String> = words.iter().map(|&w| vocab[w].to_string()).collect();
            let base = vec![ClippedEntity::unclipped(kb.entity(extra).clone(), 3)];
            let mut more = base.clone();
            more.push(ClippedEntity::unclipped(kb.entity(1 - extra).clone(), 3));
            let ctx: Vec<String> = Vec::new();
            let a = build_pseudo_labels(&ctx, &resp, &base, &kb.schema);
            let b = build_pseudo_labels(&ctx, &resp, &more, &kb.schema);
            for (x, y) in a.bits.iter().zip(&b.bits) {
                prop_assert!(x <= y);
            }
        }

        #[test]
        fn spans_are_disjoint_and_match_values(words in proptest::collection::vec(0usize..7, 0..16)) {
            let kb = kb();
            let vocab = ["pizza", "hut", "express", "south", "centre", "cb21ab", "is"];
            let resp: Vec<String> = words.iter().map(|&w| vocab[w].to_string()).collect();
            let lex = ValueLexicon::from_kb(&kb);
            let spans = lex.spans(&resp);
            let values: BTreeSet<String> =
                kb.entities().iter().flat_map(|e| e.values.values().cloned()).collect();
            for w in spans.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
            for s in &spans {
                prop_assert!(!s.is_empty());
                prop_assert!(values.contains(&resp[s.start..s.end].join(" ")));
            }
        }
    }
}
