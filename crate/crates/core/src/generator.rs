//! Fusion-style response generation: each clipped entity is encoded jointly
//! with the context, the blocks are concatenated, and the decoder attends
//! over all of them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dialog::ClippedEntity;
use crate::error::{Error, Result};
use crate::kb::{serialize_tokens, AttributeSchema};
use crate::neural::tensor::log_softmax;
use crate::neural::transformer::{head_averaged, token_embedding, DecoderOutput};
use crate::neural::{
    Decoder, Encoder, Graph, ParamGroup, ParamStore, Real, SequenceDecoder, SequenceEncoder, TransformerConfig, Var,
    Vocab,
};

#[derive(Clone, Debug)]
pub struct FusedEncoding {
    /// `H_{t,i}` per retrieved entity, in rank order.
    pub blocks: Vec<Var>,
    pub concatenated: Var,
    /// For each source position, the entity whose serialized tokens it holds;
    /// `None` for context and separator positions.
    pub segment_map: Vec<Option<usize>>,
}

impl FusedEncoding {
    pub fn entity_positions(&self, i: usize) -> Vec<usize> {
        self.segment_map
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Some(i))
            .map(|(p, _)| p)
            .collect()
    }
}

/// `C_{t,i}`: head-averaged cross-attention from KB-related target steps to
/// the tokens of one entity, laid out `[token][kb step][layer]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionRecord {
    pub entity_tokens: usize,
    pub kb_steps: usize,
    pub layers: usize,
    pub data: Vec<f64>,
}

impl CrossAttentionRecord {
    pub fn new(entity_tokens: usize, kb_steps: usize, layers: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != entity_tokens * kb_steps * layers {
            return Err(Error::Contract(format!(
                "record data has {} entries for shape {entity_tokens}x{kb_steps}x{layers}",
                data.len()
            )));
        }
        Ok(Self {
            entity_tokens,
            kb_steps,
            layers,
            data,
        })
    }

    pub fn get(&self, j: usize, m: usize, l: usize) -> f64 {
        self.data[(j * self.kb_steps + m) * self.layers + l]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.entity_tokens, self.kb_steps, self.layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "width")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Beam(usize),
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            _ => match s.strip_prefix("beam").and_then(|w| w.trim_start_matches([':', '=']).parse().ok()) {
                Some(w) if w >= 1 => Ok(Self::Beam(w)),
                _ => Err(Error::Config(format!("unknown decode mode {s:?}; use greedy or beam:N"))),
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Generator {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub context_len: usize,
    pub kb_len: usize,
    pub max_output_len: usize,
}

impl Generator {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        cfg: &TransformerConfig,
        context_len: usize,
        kb_len: usize,
        max_output_len: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let group = ParamGroup::Generator;
        let tok = token_embedding(store, "gen", group, vocab_size, cfg.d_model, rng);
        let mut enc_cfg = cfg.clone();
        enc_cfg.max_positions = enc_cfg.max_positions.max(context_len + kb_len + 1);
        let mut dec_cfg = cfg.clone();
        dec_cfg.max_positions = dec_cfg.max_positions.max(max_output_len + 1);
        Self {
            encoder: Encoder::new(store, "gen.enc", group, &enc_cfg, tok, 1.0, rng),
            decoder: Decoder::new(store, "gen.dec", group, &dec_cfg, tok, rng),
            context_len,
            kb_len,
            max_output_len,
        }
    }

    /// `[C ; Ê_i]` ids and the number of leading non-entity positions.
    pub fn block_ids<S: AsRef<str>>(
        &self,
        vocab: &Vocab,
        context: &[S],
        clipped: &ClippedEntity,
        schema: &AttributeSchema,
    ) -> (Vec<usize>, usize) {
        let start = context.len().saturating_sub(self.context_len);
        let mut ids = vocab.encode(&context[start..]);
        ids.push(vocab.sep());
        let prefix = ids.len();
        let mut ent = serialize_tokens(&clipped.entity, schema, Some(&clipped.mask));
        ent.truncate(self.kb_len);
        ids.extend(vocab.encode(&ent));
        (ids, prefix)
    }

    pub fn encode_fused<T: Real, S: AsRef<str>>(
        &self,
        g: &mut Graph<'_, T>,
        vocab: &Vocab,
        context: &[S],
        clipped: &[ClippedEntity],
        schema: &AttributeSchema,
    ) -> Result<FusedEncoding> {
        if clipped.is_empty() {
            return Err(Error::Generation("no retrieved entities to fuse".into()));
        }
        let mut blocks = Vec::with_capacity(clipped.len());
        let mut segment_map = Vec::new();
        for (i, c) in clipped.iter().enumerate() {
            let (ids, prefix) = self.block_ids(vocab, context, c, schema);
            blocks.push(self.encoder.encode(g, &ids));
            segment_map.extend((0..ids.len()).map(|p| (p >= prefix).then_some(i)));
        }
        let concatenated = if blocks.len() == 1 { blocks[0] } else { g.concat_rows(&blocks) };
        Ok(FusedEncoding {
            blocks,
            concatenated,
            segment_map,
        })
    }

    /// Teacher-forced decoding plus one attention record per entity, keeping
    /// only the target steps listed in `kb_steps`.
    pub fn decode_with_attention<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        fused: &FusedEncoding,
        input_ids: &[usize],
        kb_steps: &[usize],
    ) -> Result<(DecoderOutput, Vec<CrossAttentionRecord>)> {
        let src = g.value(fused.concatenated).rows;
        if fused.segment_map.len() != src {
            return Err(Error::Contract(format!(
                "segment map covers {} of {src} source positions",
                fused.segment_map.len()
            )));
        }
        if let Some(&bad) = kb_steps.iter().find(|&&m| m >= input_ids.len()) {
            return Err(Error::Contract(format!("kb step {bad} beyond {} target steps", input_ids.len())));
        }
        let out = self.decoder.decode(g, input_ids, fused.concatenated);
        let layers = head_averaged(g, &out.cross_attention);
        let n_entities = fused.blocks.len();
        let records = (0..n_entities)
            .map(|i| {
                let positions = fused.entity_positions(i);
                let mut data = Vec::with_capacity(positions.len() * kb_steps.len() * layers.len());
                for &j in &positions {
                    for &m in kb_steps {
                        for a in &layers {
                            data.push(a.get(m, j).to_f64().unwrap());
                        }
                    }
                }
                CrossAttentionRecord::new(positions.len(), kb_steps.len(), layers.len(), data)
            })
            .collect::<Result<_>>()?;
        Ok((out, records))
    }

    /// Decoder input and target ids for a reference response, truncated so
    /// that the target (with end marker) fits the output budget.
    pub fn teacher_forcing<S: AsRef<str>>(&self, vocab: &Vocab, reference: &[S]) -> (Vec<usize>, Vec<usize>) {
        let keep = reference.len().min(self.max_output_len.saturating_sub(1));
        let body = vocab.encode(&reference[..keep]);
        let mut input = vec![vocab.bos()];
        input.extend_from_slice(&body);
        let mut target = body;
        target.push(vocab.eos());
        (input, target)
    }

    /// `L_gen = Σ −log P(R_t,i)` and the attention records from the same pass.
    /// `kb_positions` are response token positions; those cut by truncation
    /// are dropped.
    pub fn gen_loss<T: Real, S: AsRef<str>>(
        &self,
        g: &mut Graph<'_, T>,
        vocab: &Vocab,
        fused: &FusedEncoding,
        reference: &[S],
        kb_positions: &[usize],
    ) -> Result<(Var, Vec<CrossAttentionRecord>)> {
        if reference.is_empty() {
            return Err(Error::Loss("empty reference response".into()));
        }
        let (input, target) = self.teacher_forcing(vocab, reference);
        let steps: Vec<usize> = kb_positions.iter().copied().filter(|&m| m < input.len() - 1).collect();
        let (out, records) = self.decode_with_attention(g, fused, &input, &steps)?;
        let loss = g.cross_entropy_sum(out.logits, &target);
        Ok((loss, records))
    }

    pub fn generate<T: Real, S: AsRef<str>>(
        &self,
        store: &ParamStore<T>,
        vocab: &Vocab,
        context: &[S],
        clipped: &[ClippedEntity],
        schema: &AttributeSchema,
        mode: DecodeMode,
    ) -> Result<Vec<String>> {
        let mut g = Graph::inference(store);
        let fused = self.encode_fused(&mut g, vocab, context, clipped, schema)?;
        let max_len = self.max_output_len.max(1);
        let width = match mode {
            DecodeMode::Greedy => 1,
            DecodeMode::Beam(w) => w.max(1),
        };
        // (tokens after BOS, cumulative log-prob, finished)
        let mut beams: Vec<(Vec<usize>, f64, bool)> = vec![(Vec::new(), 0.0, false)];
        for _ in 0..max_len {
            if beams.iter().all(|b| b.2) {
                break;
            }
            let mut cands = Vec::new();
            for (toks, lp, done) in &beams {
                if *done {
                    cands.push((toks.clone(), *lp, true));
                    continue;
                }
                let mut input = vec![vocab.bos()];
                input.extend_from_slice(toks);
                let out = self.decoder.decode(&mut g, &input, fused.concatenated);
                let logits = g.value(out.logits);
                let last: Vec<f64> = logits.row(logits.rows - 1).iter().map(|x| x.to_f64().unwrap()).collect();
                let logp = log_softmax(&last);
                let mut order: Vec<usize> = (0..logp.len()).filter(|&i| i != vocab.pad() && i != vocab.bos()).collect();
                order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
                for &tok in order.iter().take(width) {
                    let mut next = toks.clone();
                    let finished = tok == vocab.eos();
                    if !finished {
                        next.push(tok);
                    }
                    cands.push((next, lp + logp[tok], finished));
                }
            }
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            cands.truncate(width);
            beams = cands;
        }
        let best = &beams[0].0;
        Ok(vocab.decode(best))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{AttrMask, KnowledgeBase};
    use crate::text::tokenize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        kb: KnowledgeBase,
        vocab: Vocab,
        store: ParamStore<f64>,
        gen: Generator,
    }

    fn fixture() -> Fixture {
        let kb = KnowledgeBase::from_json_str(
            r#"[{"id": 0, "name": "pizza hut", "area": "south"},
                {"id": 1, "name": "curry king", "area": "north"}]"#,
        )
        .unwrap();
        let text = tokenize("name pizza hut area south curry king north is in the [usr] where ?");
        let vocab = Vocab::build([&text[..]], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let cfg = TransformerConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_positions: 8,
        };
        let gen = Generator::new(&mut store, vocab.len(), &cfg, 20, 10, 12, &mut rng);
        Fixture { kb, vocab, store, gen }
    }

    fn clipped(kb: &KnowledgeBase, idx: &[usize]) -> Vec<ClippedEntity> {
        idx.iter()
            .map(|&i| ClippedEntity::unclipped(kb.entity(i).clone(), kb.schema.len()))
            .collect()
    }

    #[test]
    fn fused_layout_and_record_shapes() {
        let f = fixture();
        let ctx = tokenize("[usr] where ?");
        let mut g = Graph::inference(&f.store);
        let ents = clipped(&f.kb, &[0, 1]);
        let fused = f.gen.encode_fused(&mut g, &f.vocab, &ctx, &ents, &f.kb.schema).unwrap();
        // 3 context tokens + separator + "name pizza hut area south" (5).
        assert_eq!(fused.segment_map.len(), 2 * 4 + 5 + 5);
        assert_eq!(fused.entity_positions(0), (4..9).collect::<Vec<_>>());
        assert_eq!(fused.entity_positions(1), (13..18).collect::<Vec<_>>());

        let resp = tokenize("pizza hut is in the south");
        let (loss, recs) = f.gen.gen_loss(&mut g, &f.vocab, &fused, &resp, &[0, 1, 5]).unwrap();
        assert!(g.scalar(loss) > 0.0);
        assert_eq!(recs[0].shape(), (5, 3, 2));
        let (_, none) = f.gen.gen_loss(&mut g, &f.vocab, &fused, &resp, &[]).unwrap();
        assert_eq!(none[1].shape(), (5, 0, 2));

        let single = clipped(&f.kb, &[1]);
        let fused1 = f.gen.encode_fused(&mut g, &f.vocab, &ctx, &single, &f.kb.schema).unwrap();
        assert_eq!(fused1.blocks.len(), 1);
        assert_eq!(fused1.concatenated, fused1.blocks[0]);
        let (input, _) = f.gen.teacher_forcing(&f.vocab, &resp[..1]);
        let (_, rec) = {
            let mut g2 = Graph::inference(&f.store);
            let fz = f.gen.encode_fused(&mut g2, &f.vocab, &ctx, &single, &f.kb.schema).unwrap();
            f.gen.decode_with_attention(&mut g2, &fz, &input, &[0]).unwrap()
        };
        assert_eq!(rec[0].shape(), (5, 1, 2));
    }

    #[test]
    fn loss_matches_per_token_sum() {
        let f = fixture();
        let ctx = tokenize("[usr] where ?");
        let resp = tokenize("curry king is in the north");
        let mut g = Graph::inference(&f.store);
        let ents = clipped(&f.kb, &[1, 0]);
        let fused = f.gen.encode_fused(&mut g, &f.vocab, &ctx, &ents, &f.kb.schema).unwrap();
        let (loss, _) = f.gen.gen_loss(&mut g, &f.vocab, &fused, &resp, &[]).unwrap();
        let (input, target) = f.gen.teacher_forcing(&f.vocab, &resp);
        let out = f.gen.decoder.decode(&mut g, &input, fused.concatenated);
        let logits = g.value(out.logits).clone();
        let mut want = 0.0;
        for (r, &t) in target.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            want += -(row[t] - max - z.ln());
        }
        assert!((g.scalar(loss) - want).abs() < 1e-6);
        assert!(f.gen.gen_loss(&mut g, &f.vocab, &fused, &Vec::<String>::new(), &[]).is_err());
    }

    #[test]
    fn blocks_follow_entity_permutation() {
        let f = fixture();
        let ctx = tokenize("[usr] where ?");
        let mut g = Graph::inference(&f.store);
        let ab = f.gen.encode_fused(&mut g, &f.vocab, &ctx, &clipped(&f.kb, &[0, 1]), &f.kb.schema).unwrap();
        let ba = f.gen.encode_fused(&mut g, &f.vocab, &ctx, &clipped(&f.kb, &[1, 0]), &f.kb.schema).unwrap();
        assert_eq!(g.value(ab.blocks[0]), g.value(ba.blocks[1]));
        assert_eq!(g.value(ab.blocks[1]), g.value(ba.blocks[0]));
    }

    #[test]
    fn masked_and_empty_entities() {
        let f = fixture();
        let ctx = tokenize("[usr] where ?");
        let mut ents = clipped(&f.kb, &[0]);
        ents[0].mask = AttrMask(vec![false, false]);
        let mut g = Graph::inference(&f.store);
        let fused = f.gen.encode_fused(&mut g, &f.vocab, &ctx, &ents, &f.kb.schema).unwrap();
        assert!(fused.entity_positions(0).is_empty());
        let (loss, recs) = f.gen.gen_loss(&mut g, &f.vocab, &fused, &tokenize("south"), &[0]).unwrap();
        assert!(g.scalar(loss).is_finite());
        assert_eq!(recs[0].shape(), (0, 1, 2));
        assert!(matches!(
            f.gen.encode_fused(&mut g, &f.vocab, &ctx, &[], &f.kb.schema),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn decoding_is_deterministic_and_bounded() {
        let f = fixture();
        let ctx = tokenize("[usr] where ?");
        let ents = clipped(&f.kb, &[0, 1]);
        let a = f.gen.generate(&f.store, &f.vocab, &ctx, &ents, &f.kb.schema, DecodeMode::Greedy).unwrap();
        let b = f.gen.generate(&f.store, &f.vocab, &ctx, &ents, &f.kb.schema, DecodeMode::Greedy).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 12);
        let beam = f.gen.generate(&f.store, &f.vocab, &ctx, &ents, &f.kb.schema, DecodeMode::Beam(3)).unwrap();
        assert!(beam.len() <= 12);
        assert_eq!("beam:4".parse::<DecodeMode>().unwrap(), DecodeMode::Beam(4));
        assert!("sample".parse::<DecodeMode>().is_err());
    }
}
