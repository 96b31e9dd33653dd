//! Attribute importance: per-entity scores, accumulation across retrieved
//! entities, clipping, and the auxiliary BCE loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dialog::{ClippedEntity, PseudoLabelVector};
use crate::entity::encode_pooled;
use crate::error::{Error, Result};
use crate::kb::{serialize_tokens, AttrMask, AttributeSchema, Entity};
use crate::neural::graph::bce_value;
use crate::neural::transformer::{token_embedding, Linear};
use crate::neural::{Encoder, Graph, Mat, ParamGroup, ParamStore, Real, TransformerConfig, Var, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Accumulation {
    /// `σ(Σ_i s_i a_i)` with raw selection scores.
    #[default]
    Weighted,
    /// Same, with softmax-normalized selection scores.
    Normalized,
    /// `σ(mean_i a_i)`.
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ClipStrategy {
    /// Keep attribute `j` iff `a_t[j] > τ`.
    Threshold(f64),
    /// Keep the `k` highest-scoring attributes, ties by schema order.
    TopKAttrs(usize),
    All,
}

impl Default for ClipStrategy {
    fn default() -> Self {
        Self::Threshold(0.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ClipConfig {
    pub strategy: ClipStrategy,
    pub accumulation: Accumulation,
}

impl ClipConfig {
    pub fn validate(&self, n_attrs: Option<usize>) -> Result<()> {
        match self.strategy {
            ClipStrategy::Threshold(t) if !(0.0..1.0).contains(&t) => {
                Err(Error::Config(format!("threshold {t} outside [0, 1)")))
            }
            ClipStrategy::TopKAttrs(k) if n_attrs.is_some_and(|n| k > n) => {
                Err(Error::Config(format!("top_k_attrs {k} exceeds schema size")))
            }
            _ => Ok(()),
        }
    }
}

/// `Enc_a` plus the FFN head producing one logit per attribute.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributeSelector {
    pub encoder: Encoder,
    hidden: Linear,
    out: Linear,
    pub context_len: usize,
    pub kb_len: usize,
    pub n_attrs: usize,
}

impl AttributeSelector {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        n_attrs: usize,
        cfg: &TransformerConfig,
        context_len: usize,
        kb_len: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let group = ParamGroup::AttributeSelector;
        let tok = token_embedding(store, "attr", group, vocab_size, cfg.d_model, rng);
        let mut cfg = cfg.clone();
        cfg.max_positions = cfg.max_positions.max(context_len + kb_len + 2);
        Self {
            encoder: Encoder::new(store, "attr.enc", group, &cfg, tok, 1.0, rng),
            hidden: Linear::new(store, "attr.ffn.hidden", group, cfg.d_model, cfg.d_model, rng),
            out: Linear::new(store, "attr.ffn.out", group, cfg.d_model, n_attrs, rng),
            context_len,
            kb_len,
            n_attrs,
        }
    }

    /// `[C ; E]` ids: newest context tokens, a separator, the leading entity
    /// tokens.
    pub fn input_ids<S: AsRef<str>>(&self, vocab: &Vocab, context: &[S], e: &Entity, schema: &AttributeSchema) -> Vec<usize> {
        let start = context.len().saturating_sub(self.context_len);
        let mut ids = vocab.encode(&context[start..]);
        ids.push(vocab.sep());
        let mut ent = serialize_tokens(e, schema, None);
        ent.truncate(self.kb_len);
        ids.extend(vocab.encode(&ent));
        ids
    }

    /// `K × N` matrix, row `i` = FFN(Enc_a([C ; E_i])).
    pub fn score_attributes<T: Real, S: AsRef<str>>(
        &self,
        g: &mut Graph<'_, T>,
        vocab: &Vocab,
        context: &[S],
        entities: &[&Entity],
        schema: &AttributeSchema,
    ) -> Result<Var> {
        if entities.is_empty() {
            return Err(Error::Accumulation("no entities to score".into()));
        }
        let rows: Vec<Var> = entities
            .iter()
            .map(|e| {
                let ids = self.input_ids(vocab, context, e, schema);
                let pooled = encode_pooled(&self.encoder, g, vocab.cls(), &ids)?;
                let h = self.hidden.forward(g, pooled);
                let h = g.gelu(h);
                Ok(self.out.forward(g, h))
            })
            .collect::<Result<_>>()?;
        Ok(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
    }
}

/// `a_t` as a graph node, `1 × N`. `scores` is the `1 × K` row of raw
/// selection scores.
pub fn accumulate<T: Real>(g: &mut Graph<'_, T>, per_entity: Var, scores: Var, mode: Accumulation) -> Result<Var> {
    let (k, _) = g.value(per_entity).shape();
    if k == 0 {
        return Err(Error::Accumulation("K = 0".into()));
    }
    if g.value(scores).shape() != (1, k) {
        return Err(Error::Accumulation(format!(
            "scores shape {:?} does not match {k} entities",
            g.value(scores).shape()
        )));
    }
    let weights = match mode {
        Accumulation::Weighted => scores,
        Accumulation::Normalized => g.softmax_rows(scores, false),
        Accumulation::Average => g.constant(Mat::from_vec(1, k, vec![T::one() / T::from_usize(k).unwrap(); k])),
    };
    let mixed = g.matmul(weights, per_entity);
    Ok(g.sigmoid(mixed))
}

/// Plain-value version of [`accumulate`].
pub fn accumulate_values(per_entity: &Mat<f64>, scores: &[f64], mode: Accumulation) -> Result<Vec<f64>> {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let a = g.constant(per_entity.clone());
    let s = g.constant(Mat::row_vector(scores.to_vec()));
    let out = accumulate(&mut g, a, s, mode)?;
    Ok(g.value(out).data.clone())
}

pub fn clip_mask(a_t: &[f64], strategy: ClipStrategy) -> AttrMask {
    match strategy {
        ClipStrategy::Threshold(tau) => AttrMask(a_t.iter().map(|&a| a > tau).collect()),
        ClipStrategy::TopKAttrs(k) => {
            let mut order: Vec<usize> = (0..a_t.len()).collect();
            order.sort_by(|&i, &j| a_t[j].total_cmp(&a_t[i]).then(i.cmp(&j)));
            let mut keep = vec![false; a_t.len()];
            for &j in order.iter().take(k) {
                keep[j] = true;
            }
            AttrMask(keep)
        }
        ClipStrategy::All => AttrMask::all(a_t.len()),
    }
}

/// Applies one shared attribute mask to every retrieved entity.
pub fn clip_entities(entities: &[Entity], a_t: &[f64], strategy: ClipStrategy) -> Vec<ClippedEntity> {
    let mask = clip_mask(a_t, strategy);
    entities
        .iter()
        .map(|e| ClippedEntity {
            entity: e.clone(),
            mask: mask.clone(),
        })
        .collect()
}

/// Mean binary cross-entropy over attributes, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(a_t: &[f64], b_t: &PseudoLabelVector) -> Result<f64> {
    if a_t.len() != b_t.bits.len() {
        return Err(Error::Loss(format!(
            "a_t has {} entries, b_t has {}",
            a_t.len(),
            b_t.bits.len()
        )));
    }
    Ok(bce_value(a_t, &b_t.as_f64()))
}
