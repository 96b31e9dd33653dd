//! Response and retrieval metrics, plus the lexical and oracle retrieval
//! baselines.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dialog::{Dialog, ValueLexicon};
use crate::error::{Error, Result};
use crate::kb::{serialize_tokens, EntityId, KnowledgeBase};
use crate::text;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    /// Smoothed corpus BLEU-4.
    pub bleu: f64,
    /// Unsmoothed corpus BLEU-4.
    pub bleu_raw: f64,
    pub entity_f1: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
    /// Where the gold value sets came from: `annotations` or `references`.
    pub gold_source: String,
    pub turns: usize,
}

/// Micro-averaged F1 (percent) between predicted and gold value sets.
pub fn entity_f1_sets(predicted: &[BTreeSet<String>], gold: &[BTreeSet<String>]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold sets",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        tp += p.intersection(g).count();
        n_pred += p.len();
        n_gold += g.len();
    }
    let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let recall = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * precision * recall / (precision + recall))
}

/// Entity F1 of generated responses, values found with the KB lexicon.
pub fn entity_f1(predictions: &[Vec<String>], gold_values: &[BTreeSet<String>], lexicon: &ValueLexicon) -> Result<f64> {
    let predicted: Vec<BTreeSet<String>> = predictions.iter().map(|p| lexicon.values_in(p)).collect();
    entity_f1_sets(&predicted, gold_values)
}

/// Gold value sets read off reference responses.
pub fn gold_values_from_references(references: &[Vec<String>], lexicon: &ValueLexicon) -> Vec<BTreeSet<String>> {
    references.iter().map(|r| lexicon.values_in(r)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// Add-epsilon smoothing on zero n-gram matches.
    pub smoothed: f64,
    pub raw: f64,
}

const BLEU_EPSILON: f64 = 0.1;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 with brevity penalty, in percent. Each sentence contributes
/// at least one to every n-gram denominator, as in NLTK.
pub fn bleu(predictions: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuScore> {
    if predictions.is_empty() {
        return Err(Error::Metric("BLEU of an empty corpus".into()));
    }
    if predictions.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in predictions.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1).max(1);
        }
    }
    if hyp_len == 0 {
        return Ok(BleuScore { smoothed: 0.0, raw: 0.0 });
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let w = 0.25;
    let mut log_raw = 0.0;
    let mut log_smooth = 0.0;
    let mut raw_zero = false;
    for i in 0..4 {
        let t = totals[i] as f64;
        if matches[i] == 0 {
            raw_zero = true;
            log_smooth += w * (BLEU_EPSILON / t).ln();
        } else {
            let p = (matches[i] as f64 / t).ln();
            log_raw += w * p;
            log_smooth += w * p;
        }
    }
    Ok(BleuScore {
        smoothed: 100.0 * bp * log_smooth.exp(),
        raw: if raw_zero { 0.0 } else { 100.0 * bp * log_raw.exp() },
    })
}

/// Percent of turns whose suggested entities all sit in the top `k`.
/// Turns without suggested entities are not counted.
pub fn recall_at_k(retrieved: &[Vec<EntityId>], suggested: &[Vec<EntityId>], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Contract("recall@k needs k >= 1".into()));
    }
    if retrieved.len() != suggested.len() {
        return Err(Error::Contract(format!(
            "{} rankings for {} suggestion lists",
            retrieved.len(),
            suggested.len()
        )));
    }
    let mut counted = 0usize;
    let mut hits = 0usize;
    for (r, s) in retrieved.iter().zip(suggested) {
        if s.is_empty() {
            continue;
        }
        counted += 1;
        let top = &r[..k.min(r.len())];
        if s.iter().all(|id| top.contains(id)) {
            hits += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Metric("no turn has suggested entities".into()));
    }
    Ok(100.0 * hits as f64 / counted as f64)
}

/// Entities whose name value occurs in the response.
pub fn suggested_entities<S: AsRef<str>>(kb: &KnowledgeBase, response: &[S]) -> Vec<EntityId> {
    kb.entities()
        .iter()
        .filter(|e| {
            e.value("name")
                .is_some_and(|n| text::contains_run(response, &text::tokenize(n)))
        })
        .map(|e| e.id)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    Oracle,
    Frequency,
    Bm25,
    Maker,
}

impl std::str::FromStr for RetrieverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "frequency" => Ok(Self::Frequency),
            "bm25" => Ok(Self::Bm25),
            "maker" => Ok(Self::Maker),
            other => Err(Error::Config(format!("unknown retriever {other:?}"))),
        }
    }
}

/// Ranks by total occurrences of each entity's values in the context, ties
/// by id.
pub fn frequency_rank<S: AsRef<str>>(kb: &KnowledgeBase, context: &[S]) -> Vec<EntityId> {
    let mut scored: Vec<(usize, EntityId)> = kb
        .entities()
        .iter()
        .map(|e| {
            let c = e
                .values
                .values()
                .map(|v| text::find_all(context, &text::tokenize(v)).len())
                .sum();
            (c, e.id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|s| s.1).collect()
}

pub const BM25_K1: f64 = 1.5;
pub const BM25_B: f64 = 0.75;

/// Okapi BM25 over serialized entities.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    ids: Vec<EntityId>,
    docs: Vec<HashMap<String, usize>>,
    lens: Vec<f64>,
    avgdl: f64,
    df: HashMap<String, usize>,
}

impl Bm25Index {
    pub fn new(kb: &KnowledgeBase) -> Self {
        let mut docs = Vec::with_capacity(kb.len());
        let mut lens = Vec::with_capacity(kb.len());
        let mut df: HashMap<String, usize> = HashMap::new();
        for e in kb.entities() {
            let toks = serialize_tokens(e, &kb.schema, None);
            lens.push(toks.len() as f64);
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_insert(0) += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_insert(0) += 1;
            }
            docs.push(tf);
        }
        let avgdl = if lens.is_empty() { 0.0 } else { lens.iter().sum::<f64>() / lens.len() as f64 };
        Self {
            ids: kb.ids(),
            docs,
            lens,
            avgdl,
            df,
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let nq = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - nq + 0.5) / (nq + 0.5) + 1.0).ln()
    }

    /// Score of every entity, in KB order. Repeated query terms count once
    /// per occurrence.
    pub fn scores<S: AsRef<str>>(&self, query: &[S]) -> Vec<(EntityId, f64)> {
        self.docs
            .iter()
            .enumerate()
            .map(|(d, tf)| {
                let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * self.lens[d] / self.avgdl.max(1e-12));
                let s = query
                    .iter()
                    .map(|q| {
                        let f = tf.get(q.as_ref()).copied().unwrap_or(0) as f64;
                        if f == 0.0 {
                            0.0
                        } else {
                            self.idf(q.as_ref()) * f * (BM25_K1 + 1.0) / (f + norm)
                        }
                    })
                    .sum();
                (self.ids[d], s)
            })
            .collect()
    }

    pub fn rank<S: AsRef<str>>(&self, query: &[S]) -> Vec<EntityId> {
        let mut s = self.scores(query);
        s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        s.into_iter().map(|x| x.0).collect()
    }
}

/// Ranked ids from a lexical or oracle retriever, at most `k` of them.
pub fn baseline_retrieve<S: AsRef<str>>(
    kind: RetrieverKind,
    context: &[S],
    kb: &KnowledgeBase,
    dialog: Option<&Dialog>,
    k: usize,
) -> Result<Vec<EntityId>> {
    if kb.is_empty() {
        return Err(Error::Baseline("empty knowledge base".into()));
    }
    let mut ranked = match kind {
        RetrieverKind::Oracle => {
            let d = dialog.ok_or_else(|| Error::Baseline("oracle retrieval needs the dialog".into()))?;
            if d.condensed_entity_ids.is_empty() {
                return Err(Error::Baseline("dialog has no condensed entity annotation".into()));
            }
            d.condensed_entity_ids.clone()
        }
        RetrieverKind::Frequency => frequency_rank(kb, context),
        RetrieverKind::Bm25 => Bm25Index::new(kb).rank(context),
        RetrieverKind::Maker => {
            return Err(Error::Baseline("the maker retriever needs a trained model".into()))
        }
    };
    ranked.truncate(k);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;
    use proptest::prelude::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn entity_f1_hand_case() {
        let gold = [set(&["a", "b"]), set(&["c"]), set(&[])];
        let pred = [set(&["a"]), set(&["c", "d"]), set(&[])];
        let f1 = entity_f1_sets(&pred, &gold).unwrap();
        assert!((f1 - 66.6667).abs() < 0.01);
        assert_eq!(entity_f1_sets(&gold, &gold).unwrap(), 100.0);
        assert_eq!(entity_f1_sets(&[set(&[]), set(&[]), set(&[])], &gold).unwrap(), 0.0);
        assert!(entity_f1_sets(&pred[..2], &gold).is_err());
    }

    #[test]
    fn entity_f1_uses_set_semantics() {
        let kb = KnowledgeBase::from_json_str(r#"[{"name": "pizza hut", "area": "south"}]"#).unwrap();
        let lex = ValueLexicon::from_kb(&kb);
        let gold = vec![set(&["pizza_hut", "south"])];
        let once = vec![tokenize("south , pizza hut")];
        let twice = vec![tokenize("pizza hut pizza hut in the south south")];
        assert_eq!(entity_f1(&once, &gold, &lex).unwrap(), 100.0);
        assert_eq!(entity_f1(&twice, &gold, &lex).unwrap(), 100.0);
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_reference_values() {
        let refs = vec![
            toks("the cat is on the mat near the door"),
            toks("pizza hut is a cheap restaurant in the south"),
        ];
        let same = bleu(&refs, &refs).unwrap();
        assert!((same.raw - 100.0).abs() < 1e-9 && (same.smoothed - 100.0).abs() < 1e-9);
        // Expected values from NLTK's corpus_bleu (method1 smoothing, epsilon 0.1).
        let hyps = vec![
            toks("the cat sat on the mat near a door"),
            toks("pizza hut is cheap and in the south"),
        ];
        let b = bleu(&hyps, &refs).unwrap();
        assert!((b.raw - 31.390896196402508).abs() < 1e-6 && (b.smoothed - b.raw).abs() < 1e-9, "{b:?}");
        let hyps = vec![toks("the cat"), toks("pizza express is nice in the north area")];
        let b = bleu(&hyps, &refs).unwrap();
        assert_eq!(b.raw, 0.0);
        assert!((b.smoothed - 3.473560813000174).abs() < 1e-6, "{b:?}");
        let disjoint = bleu(&[toks("x y z w")], &[toks("a b c d")]).unwrap();
        assert_eq!(disjoint.raw, 0.0);
        assert!(disjoint.smoothed < 15.0);
        assert!(bleu(&[], &[]).is_err());
    }

    #[test]
    fn recall_cases() {
        let r = vec![vec![EntityId(3), EntityId(1), EntityId(2)]];
        let s = vec![vec![EntityId(2)]];
        assert_eq!(recall_at_k(&r, &s, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&r, &s, 3).unwrap(), 100.0);
        assert_eq!(recall_at_k(&r, &s, 10).unwrap(), 100.0);
        assert!(recall_at_k(&r, &s, 0).is_err());
        let excluded = vec![vec![]];
        assert!(recall_at_k(&r, &excluded, 1).is_err());
    }

    #[test]
    fn frequency_and_bm25_baselines() {
        let kb = KnowledgeBase::from_json_str(
            r#"[{"id": 0, "name": "pizza hut", "area": "south"},
                {"id": 1, "name": "curry king", "area": "north"},
                {"id": 2, "name": "curry king 2", "area": "north"}]"#,
        )
        .unwrap();
        let ctx = tokenize("[usr] curry king or pizza hut ? curry king please");
        assert_eq!(frequency_rank(&kb, &ctx)[0], EntityId(1));
        let bm = Bm25Index::new(&kb);
        let twins = KnowledgeBase::from_json_str(r#"[{"id": 5, "name": "x"}, {"id": 4, "name": "x"}]"#).unwrap();
        let s = Bm25Index::new(&twins).scores(&tokenize("x"));
        assert_eq!(s[0].1, s[1].1);
        assert_eq!(Bm25Index::new(&twins).rank(&tokenize("x")), vec![EntityId(4), EntityId(5)]);
        assert_eq!(bm.rank(&tokenize("south"))[0], EntityId(0));
        let d = Dialog {
            condensed_entity_ids: vec![EntityId(2), EntityId(0)],
            ..Default::default()
        };
        let o = baseline_retrieve(RetrieverKind::Oracle, &ctx, &kb, Some(&d), 7).unwrap();
        assert_eq!(o, vec![EntityId(2), EntityId(0)]);
        assert!(baseline_retrieve(RetrieverKind::Oracle, &ctx, &kb, Some(&Dialog::default()), 7).is_err());
        assert_eq!(suggested_entities(&kb, &tokenize("try curry king 2 today")), vec![EntityId(1), EntityId(2)]);
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(perm in Just((0u32..12).collect::<Vec<_>>()).prop_shuffle(), gold in proptest::collection::vec(0u32..12, 1..3)) {
            let r = vec![perm.into_iter().map(EntityId).collect::<Vec<_>>()];
            let s = vec![gold.into_iter().map(EntityId).collect::<Vec<_>>()];
            let mut prev = 0.0;
            for k in 1..=12 {
                let v = recall_at_k(&r, &s, k).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
            prop_assert_eq!(prev, 100.0);
        }
    }
}
