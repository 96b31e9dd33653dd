//! Pre-LayerNorm transformer encoder and decoder built on [`Graph`].
//!
//! Modules only hold parameter ids, so the same module runs on an `f32`
//! store for training and an `f64` copy for gradient checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamGroup, ParamId, ParamStore};
use super::tensor::{Mat, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(crate::Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(crate::Error::Config(
                "n_layers, d_ff and max_positions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Model backends. Only the from-scratch toy backend ships weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Toy,
    Pretrained,
}

impl std::str::FromStr for Backend {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "pretrained" => Ok(Self::Pretrained),
            other => Err(crate::Error::Config(format!("unknown backend {other:?}"))),
        }
    }
}

impl Backend {
    pub fn ensure_available(self) -> crate::Result<()> {
        match self {
            Backend::Toy => Ok(()),
            Backend::Pretrained => Err(crate::Error::Config(
                "pretrained backend needs external BERT/T5 weights, which this build cannot load; use --backend toy"
                    .into(),
            )),
        }
    }
}

/// Anything mapping a token sequence to one hidden row per token.
pub trait SequenceEncoder {
    fn d_model(&self) -> usize;
    fn max_positions(&self) -> usize;
    fn encode<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Var;
}

pub struct DecoderOutput {
    /// `T × vocab`
    pub logits: Var,
    /// Per layer, per head: post-softmax cross-attention, `T × S`.
    pub cross_attention: Vec<Vec<Var>>,
}

pub trait SequenceDecoder {
    fn decode<T: Real>(&self, g: &mut Graph<'_, T>, input_ids: &[usize], memory: Var) -> DecoderOutput;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Self {
            w: store.add_normal(format!("{name}.w"), group, d_in, d_out, std, rng),
            b: store.add_const(format!("{name}.b"), group, 1, d_out, 0.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, d: usize, gain: f64) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), group, 1, d, gain),
            bias: store.add_const(format!("{name}.bias"), group, 1, d, 0.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_heads: usize,
}

impl Attention {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), group, d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), group, d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), group, d, d, rng),
            n_heads: cfg.n_heads,
        }
    }

    /// Returns the attended output and each head's probability matrix.
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, memory: Var, causal: bool) -> (Var, Vec<Var>) {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let d = g.value(q).cols;
        let hd = d / self.n_heads;
        let scale = T::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let mut outs = Vec::with_capacity(self.n_heads);
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * hd, hd),
                    g.slice_cols(k, h * hd, hd),
                    g.slice_cols(v, h * hd, hd),
                )
            };
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows(scores, causal);
            outs.push(g.matmul(p, vh));
            probs.push(p);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.o.forward(g, cat), probs)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), group, cfg.d_model, cfg.d_ff, rng),
            down: Linear::new(store, &format!("{name}.down"), group, cfg.d_ff, cfg.d_model, rng),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    cfg: TransformerConfig,
    tok: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    ln_f: LayerNorm,
}

/// Token embedding table of `vocab × d_model`.
pub fn token_embedding<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    group: ParamGroup,
    vocab: usize,
    d_model: usize,
    rng: &mut impl Rng,
) -> ParamId {
    store.add_normal(format!("{name}.tok"), group, vocab, d_model, 0.1, rng)
}

impl Encoder {
    /// `out_gain` initializes the final LayerNorm gain, which sets the scale
    /// of pooled outputs.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        cfg: &TransformerConfig,
        tok: ParamId,
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let pos = store.add_normal(format!("{name}.pos"), group, cfg.max_positions, cfg.d_model, 0.1, rng);
        let layers = (0..cfg.n_layers)
            .map(|l| EncoderLayer {
                ln1: LayerNorm::new(store, &format!("{name}.{l}.ln1"), group, cfg.d_model, 1.0),
                attn: Attention::new(store, &format!("{name}.{l}.attn"), group, cfg, rng),
                ln2: LayerNorm::new(store, &format!("{name}.{l}.ln2"), group, cfg.d_model, 1.0),
                ff: FeedForward::new(store, &format!("{name}.{l}.ff"), group, cfg, rng),
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            tok,
            pos,
            layers,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), group, cfg.d_model, out_gain),
        }
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }
}

fn embed_with_positions<T: Real>(g: &mut Graph<'_, T>, tok: ParamId, pos: ParamId, ids: &[usize]) -> Var {
    let table = g.param(tok);
    let x = g.embed(table, ids);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let ptable = g.param(pos);
    let p = g.embed(ptable, &positions);
    g.add(x, p)
}

impl SequenceEncoder for Encoder {
    fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    fn max_positions(&self) -> usize {
        self.cfg.max_positions
    }

    fn encode<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Var {
        assert!(!ids.is_empty(), "cannot encode an empty sequence");
        let ids = &ids[..ids.len().min(self.cfg.max_positions)];
        let mut x = embed_with_positions(g, self.tok, self.pos, ids);
        for layer in &self.layers {
            let h = layer.ln1.forward(g, x);
            let (a, _) = layer.attn.forward(g, h, h, false);
            x = g.add(x, a);
            let h = layer.ln2.forward(g, x);
            let f = layer.ff.forward(g, h);
            x = g.add(x, f);
        }
        self.ln_f.forward(g, x)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Causal decoder with output projection tied to the token embedding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    cfg: TransformerConfig,
    tok: ParamId,
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
}

impl Decoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        cfg: &TransformerConfig,
        tok: ParamId,
        rng: &mut impl Rng,
    ) -> Self {
        let pos = store.add_normal(format!("{name}.pos"), group, cfg.max_positions, cfg.d_model, 0.1, rng);
        let layers = (0..cfg.n_layers)
            .map(|l| DecoderLayer {
                ln1: LayerNorm::new(store, &format!("{name}.{l}.ln1"), group, cfg.d_model, 1.0),
                self_attn: Attention::new(store, &format!("{name}.{l}.self"), group, cfg, rng),
                ln2: LayerNorm::new(store, &format!("{name}.{l}.ln2"), group, cfg.d_model, 1.0),
                cross_attn: Attention::new(store, &format!("{name}.{l}.cross"), group, cfg, rng),
                ln3: LayerNorm::new(store, &format!("{name}.{l}.ln3"), group, cfg.d_model, 1.0),
                ff: FeedForward::new(store, &format!("{name}.{l}.ff"), group, cfg, rng),
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            tok,
            pos,
            layers,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), group, cfg.d_model, 1.0),
        }
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }
}

impl SequenceDecoder for Decoder {
    fn decode<T: Real>(&self, g: &mut Graph<'_, T>, input_ids: &[usize], memory: Var) -> DecoderOutput {
        assert!(!input_ids.is_empty(), "decoder needs at least the start token");
        assert!(input_ids.len() <= self.cfg.max_positions, "decoder input exceeds max positions");
        let mut x = embed_with_positions(g, self.tok, self.pos, input_ids);
        let mut cross_attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.ln1.forward(g, x);
            let (a, _) = layer.self_attn.forward(g, h, h, true);
            x = g.add(x, a);
            let h = layer.ln2.forward(g, x);
            let (c, probs) = layer.cross_attn.forward(g, h, memory, false);
            cross_attention.push(probs);
            x = g.add(x, c);
            let h = layer.ln3.forward(g, x);
            let f = layer.ff.forward(g, h);
            x = g.add(x, f);
        }
        let h = self.ln_f.forward(g, x);
        let table = g.param(self.tok);
        let logits = g.matmul_bt(h, table);
        DecoderOutput {
            logits,
            cross_attention,
        }
    }
}

/// Head-averaged cross-attention per layer, read off graph values.
pub fn head_averaged<T: Real>(g: &Graph<'_, T>, cross: &[Vec<Var>]) -> Vec<Mat<T>> {
    cross
        .iter()
        .map(|heads| {
            let mut acc = g.value(heads[0]).clone();
            for &h in &heads[1..] {
                acc.add_assign(g.value(h));
            }
            acc.scale(T::one() / T::from_usize(heads.len()).unwrap());
            acc
        })
        .collect()
}
