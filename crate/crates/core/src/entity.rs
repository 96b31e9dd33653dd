//! Dual-encoder entity selection: pooled context/entity vectors, an exact
//! inner-product index with periodic refresh, and contrastive pre-training.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::kb::{serialize_tokens, AttributeSchema, Entity, EntityId, KnowledgeBase};
use crate::neural::optim::linear_decay;
use crate::neural::transformer::token_embedding;
use crate::neural::{
    AdamW, AdamWConfig, Encoder, Graph, Mat, ParamGroup, ParamStore, Real, SequenceEncoder, TransformerConfig,
    Var, Vocab,
};
use crate::text;

/// Raw selection scores and their softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityScores {
    pub pairs: Vec<(EntityId, f64)>,
    pub normalized: Vec<f64>,
}

impl EntityScores {
    pub fn from_pairs(pairs: Vec<(EntityId, f64)>) -> Self {
        let raw: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        Self {
            normalized: crate::neural::tensor::softmax(&raw),
            pairs,
        }
    }

    pub fn ids(&self) -> Vec<EntityId> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn raw(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Keeps the `k` best scores, descending, ties by ascending id. A `k` larger
/// than the candidate set keeps everything.
pub fn top_k(scores: &EntityScores, k: usize) -> Result<EntityScores> {
    if scores.is_empty() {
        return Err(Error::Retrieval("no entities to rank".into()));
    }
    if k == 0 {
        return Err(Error::Contract("top_k needs k >= 1".into()));
    }
    let mut pairs = scores.pairs.clone();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs.truncate(k);
    Ok(EntityScores::from_pairs(pairs))
}

/// Exact MIPS over a snapshot of entity embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityIndex {
    ids: Vec<EntityId>,
    matrix: Mat<f32>,
    /// Training steps since the snapshot was taken.
    pub staleness: usize,
}

const INDEX_MAGIC: &[u8; 4] = b"MKIX";

impl EntityIndex {
    pub fn new(ids: Vec<EntityId>, matrix: Mat<f32>) -> Result<Self> {
        if ids.len() != matrix.rows {
            return Err(Error::Contract(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                matrix.rows
            )));
        }
        Ok(Self {
            ids,
            matrix,
            staleness: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols
    }

    pub fn ids(&self) -> &[EntityId] {
        &self.ids
    }

    pub fn matrix(&self) -> &Mat<f32> {
        &self.matrix
    }

    pub fn row(&self, id: EntityId) -> Option<&[f32]> {
        self.ids.iter().position(|&x| x == id).map(|r| self.matrix.row(r))
    }

    /// `⟨ctx, row_i⟩` for every entity, accumulated in double precision.
    pub fn score_entities(&self, ctx: &[f32]) -> Result<EntityScores> {
        if self.is_empty() {
            return Err(Error::Retrieval("entity index is empty".into()));
        }
        if ctx.len() != self.dim() {
            return Err(Error::Contract(format!(
                "query dim {} != index dim {}",
                ctx.len(),
                self.dim()
            )));
        }
        let pairs = self
            .ids
            .iter()
            .enumerate()
            .map(|(r, &id)| {
                let s = self
                    .matrix
                    .row(r)
                    .iter()
                    .zip(ctx)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>();
                (id, s)
            })
            .collect();
        Ok(EntityScores::from_pairs(pairs))
    }

    pub fn search(&self, ctx: &[f32], k: usize) -> Result<EntityScores> {
        top_k(&self.score_entities(ctx)?, k)
    }

    /// Restricts retrieval to a KB view (condensed or in-domain).
    pub fn search_within(&self, ctx: &[f32], k: usize, allowed: &[EntityId]) -> Result<EntityScores> {
        let all = self.score_entities(ctx)?;
        let pairs: Vec<_> = all
            .pairs
            .into_iter()
            .filter(|(id, _)| allowed.contains(id))
            .collect();
        top_k(&EntityScores::from_pairs(pairs), k)
    }

    /// Little-endian: magic, d, B, ids, then the row-major matrix.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        for id in &self.ids {
            w.write_u32::<LittleEndian>(id.0)?;
        }
        for &x in &self.matrix.data {
            w.write_f32::<LittleEndian>(x)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Retrieval(format!("corrupt index: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Retrieval("not an entity index file".into()));
        }
        let d = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let b = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let ids = (0..b)
            .map(|_| r.read_u32::<LittleEndian>().map(EntityId))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(bad)?;
        let mut data = vec![0f32; b * d];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(bad)?;
        Self::new(ids, Mat::from_vec(b, d, data))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// `[CLS] ids…` through `enc`, returning the CLS row.
pub fn encode_pooled<T: Real, E: SequenceEncoder>(enc: &E, g: &mut Graph<'_, T>, cls: usize, ids: &[usize]) -> Result<Var> {
    if ids.len() + 1 > enc.max_positions() {
        return Err(Error::Contract(format!(
            "sequence of {} tokens exceeds encoder limit {}",
            ids.len() + 1,
            enc.max_positions()
        )));
    }
    let mut full = Vec::with_capacity(ids.len() + 1);
    full.push(cls);
    full.extend_from_slice(ids);
    let h = enc.encode(g, &full);
    Ok(g.slice_rows(h, 0, 1))
}

/// Shared-weight context/entity encoder (Enc_c = Enc_e).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntitySelector {
    pub encoder: Encoder,
    /// Token budget per encoded sequence, CLS included.
    pub max_len: usize,
}

impl EntitySelector {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        cfg: &TransformerConfig,
        out_gain: f64,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let group = ParamGroup::EntitySelector;
        let tok = token_embedding(store, "sel", group, vocab_size, cfg.d_model, rng);
        let mut cfg = cfg.clone();
        cfg.max_positions = cfg.max_positions.max(max_len);
        Self {
            encoder: Encoder::new(store, "sel.enc", group, &cfg, tok, out_gain, rng),
            max_len,
        }
    }

    /// Newest `max_len - 1` context tokens.
    pub fn context_ids<S: AsRef<str>>(&self, vocab: &Vocab, context: &[S]) -> Vec<usize> {
        let keep = self.max_len.saturating_sub(1);
        let start = context.len().saturating_sub(keep);
        vocab.encode(&context[start..])
    }

    pub fn entity_ids(&self, vocab: &Vocab, e: &Entity, schema: &AttributeSchema) -> Vec<usize> {
        let mut toks = serialize_tokens(e, schema, None);
        toks.truncate(self.max_len.saturating_sub(1));
        vocab.encode(&toks)
    }

    pub fn encode_context<T: Real, S: AsRef<str>>(&self, g: &mut Graph<'_, T>, vocab: &Vocab, context: &[S]) -> Var {
        let ids = self.context_ids(vocab, context);
        encode_pooled(&self.encoder, g, vocab.cls(), &ids).expect("ids fit the budget")
    }

    pub fn encode_entity<T: Real>(&self, g: &mut Graph<'_, T>, vocab: &Vocab, e: &Entity, schema: &AttributeSchema) -> Var {
        let ids = self.entity_ids(vocab, e, schema);
        encode_pooled(&self.encoder, g, vocab.cls(), &ids).expect("ids fit the budget")
    }

    pub fn context_vector<T: Real, S: AsRef<str>>(&self, store: &ParamStore<T>, vocab: &Vocab, context: &[S]) -> Vec<f32> {
        let mut g = Graph::inference(store);
        let v = self.encode_context(&mut g, vocab, context);
        g.value(v).data.iter().map(|x| x.to_f32().unwrap()).collect()
    }

    /// Re-encodes every entity of `kb`.
    pub fn refresh_index<T: Real>(&self, store: &ParamStore<T>, vocab: &Vocab, kb: &KnowledgeBase) -> EntityIndex {
        let d = self.encoder.d_model();
        let mut data = Vec::with_capacity(kb.len() * d);
        for e in kb.entities() {
            let mut g = Graph::inference(store);
            let v = self.encode_entity(&mut g, vocab, e, &kb.schema);
            data.extend(g.value(v).data.iter().map(|x| x.to_f32().unwrap()));
        }
        EntityIndex::new(kb.ids(), Mat::from_vec(kb.len(), d, data)).expect("one row per entity")
    }
}

/// Distant-supervision label: the entity whose attribute values occur most
/// often in context plus response, ties to the lowest id. `None` when no
/// value occurs at all.
pub fn distant_label<S: AsRef<str>>(kb: &KnowledgeBase, context: &[S], response: &[S]) -> Option<EntityId> {
    let mut best: Option<(usize, EntityId)> = None;
    for e in kb.entities() {
        let count: usize = e
            .values
            .values()
            .map(|v| {
                let run = text::tokenize(v);
                text::find_all(context, &run).len() + text::find_all(response, &run).len()
            })
            .sum();
        if count == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((c, id)) => count > c || (count == c && e.id < id),
        };
        if better {
            best = Some((count, e.id));
        }
    }
    best.map(|b| b.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub max_len: usize,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "pretrain.batch_size must be at least 2 for in-batch negatives".into(),
            ));
        }
        if self.temperature <= 0.0 || self.lr <= 0.0 {
            return Err(Error::Config("pretrain temperature and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainExample {
    pub context: Vec<String>,
    pub label: EntityId,
}

/// InfoNCE over cosine similarities with in-batch negatives. Columns whose
/// label equals the row's label (other than the diagonal) are masked, since
/// they are positives rather than negatives.
pub fn info_nce_loss<T: Real>(g: &mut Graph<'_, T>, ctx: Var, ent: Var, labels: &[EntityId], temperature: f64) -> Var {
    let n = labels.len();
    let c = g.l2_normalize_rows(ctx);
    let e = g.l2_normalize_rows(ent);
    let sim = g.matmul_bt(c, e);
    let sim = g.scale(sim, T::from_f64_lossy(1.0 / temperature));
    let mut mask = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                mask.set(i, j, T::from_f64_lossy(-1e4));
            }
        }
    }
    let mask = g.constant(mask);
    let logits = g.add(sim, mask);
    let targets: Vec<usize> = (0..n).collect();
    let total = g.cross_entropy_sum(logits, &targets);
    g.scale(total, T::from_f64_lossy(1.0 / n as f64))
}

/// Trains the selector in place. Returns the mean loss of every epoch.
pub fn pretrain_contrastive(
    selector: &EntitySelector,
    store: &mut ParamStore<f32>,
    vocab: &Vocab,
    kb: &KnowledgeBase,
    examples: &[PretrainExample],
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if examples.len() < 2 {
        return Err(Error::Config("pre-training needs at least two examples".into()));
    }
    let sel = EntitySelector {
        encoder: selector.encoder.clone(),
        max_len: cfg.max_len.min(selector.encoder.max_positions()),
    };
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (loss, grads) = {
                let mut g = Graph::new(store, &[ParamGroup::EntitySelector]);
                let mut ctx_rows = Vec::with_capacity(chunk.len());
                let mut ent_rows = Vec::with_capacity(chunk.len());
                let mut labels = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let ex = &examples[i];
                    let entity = kb.get(ex.label).ok_or(Error::Lookup(ex.label.0))?;
                    ctx_rows.push(sel.encode_context(&mut g, vocab, &ex.context));
                    ent_rows.push(sel.encode_entity(&mut g, vocab, entity, &kb.schema));
                    labels.push(ex.label);
                }
                let c = g.concat_rows(&ctx_rows);
                let e = g.concat_rows(&ent_rows);
                let l = info_nce_loss(&mut g, c, e, &labels, cfg.temperature);
                let loss = g.scalar(l) as f64;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        detail: "contrastive loss".into(),
                    });
                }
                let grads = g.backward(l);
                (loss, g.param_grads(&grads))
            };
            let lr = cfg.lr * linear_decay(step, total);
            opt.step(store, &grads, |_| lr);
            step += 1;
            sum += loss;
            batches += 1;
        }
        history.push(sum / batches.max(1) as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_top_k(matrix: &Mat<f32>, ids: &[EntityId], q: &[f32], k: usize) -> Vec<EntityId> {
        let mut all: Vec<(f64, EntityId)> = (0..matrix.rows)
            .map(|r| {
                let mut s = 0.0f64;
                for c in 0..matrix.cols {
                    s += matrix.get(r, c) as f64 * q[c] as f64;
                }
                (s, ids[r])
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|x| x.1).collect()
    }

    fn random_index(b: usize, d: usize, rng: &mut ChaCha8Rng) -> EntityIndex {
        let data = (0..b * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        EntityIndex::new((0..b as u32).map(EntityId).collect(), Mat::from_vec(b, d, data)).unwrap()
    }

    #[test]
    fn scoring_edge_cases() {
        let idx = EntityIndex::new(
            vec![EntityId(4), EntityId(2), EntityId(9)],
            Mat::from_vec(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]),
        )
        .unwrap();
        let zero = idx.score_entities(&[0.0; 3]).unwrap();
        assert!(zero.raw().iter().all(|&s| s == 0.0));
        // All ties: ids ascending.
        assert_eq!(top_k(&zero, 2).unwrap().ids(), vec![EntityId(2), EntityId(4)]);
        let hit = idx.search(&[0.0, 0.0, 1.0], 1).unwrap();
        assert_eq!(hit.ids(), vec![EntityId(9)]);
        assert_eq!(idx.search(&[1.0, 1.0, 1.0], 10).unwrap().len(), 3);
        assert!(matches!(idx.score_entities(&[1.0]), Err(Error::Contract(_))));
        let empty = EntityIndex::new(vec![], Mat::zeros(0, 3)).unwrap();
        assert!(matches!(empty.search(&[0.0; 3], 1), Err(Error::Retrieval(_))));
    }

    #[test]
    fn search_matches_brute_force_and_softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let idx = random_index(300, 16, &mut rng);
        for _ in 0..20 {
            let q: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            for k in [1, 5, 7] {
                let got = idx.search(&q, k).unwrap();
                assert_eq!(got.ids(), brute_top_k(idx.matrix(), idx.ids(), &q, k));
                assert!((got.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shift_invariance_of_top_k() {
        let pairs: Vec<_> = (0..6).map(|i| (EntityId(i), (i as f64 * 0.7).sin())).collect();
        let a = top_k(&EntityScores::from_pairs(pairs.clone()), 4).unwrap();
        let shifted: Vec<_> = pairs.iter().map(|&(id, s)| (id, s + 3.5)).collect();
        let b = top_k(&EntityScores::from_pairs(shifted), 4).unwrap();
        assert_eq!(a.ids(), b.ids());
        for (x, y) in a.normalized.iter().zip(&b.normalized) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn index_binary_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let idx = random_index(10, 4, &mut rng);
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 8 + 10 * 4 + 40 * 4);
        assert_eq!(EntityIndex::read_from(&buf[..]).unwrap(), idx);
        assert!(EntityIndex::read_from(&buf[..20]).is_err());
        assert!(EntityIndex::read_from(&b"nope"[..]).is_err());
    }

    #[test]
    fn distant_label_counts_occurrences() {
        let kb = KnowledgeBase::from_json_str(
            r#"[{"id": 3, "name": "pizza hut", "area": "south"},
                {"id": 1, "name": "golden wok", "area": "south"},
                {"id": 2, "name": "curry king", "area": "north"}]"#,
        )
        .unwrap();
        let ctx = text::tokenize("[usr] anything in the south ?");
        let resp = text::tokenize("pizza hut is in the south");
        assert_eq!(distant_label(&kb, &ctx, &resp), Some(EntityId(3)));
        let resp = text::tokenize("there are two in the south");
        assert_eq!(distant_label(&kb, &ctx, &resp), Some(EntityId(1)));
        let none = text::tokenize("hello");
        assert_eq!(distant_label(&kb, &none, &none), None);
    }

    #[test]
    fn aligned_batch_has_lower_info_nce_than_shuffled() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let eye = Mat::from_vec(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let shuffled = Mat::from_vec(3, 3, vec![0., 1., 0., 0., 0., 1., 1., 0., 0.]);
        let labels = [EntityId(0), EntityId(1), EntityId(2)];
        let c = g.constant(eye.clone());
        let e = g.constant(eye);
        let s = g.constant(shuffled);
        let aligned = info_nce_loss(&mut g, c, e, &labels, 0.05);
        let bad = info_nce_loss(&mut g, c, s, &labels, 0.05);
        assert!(g.scalar(aligned) < 1e-6);
        assert!(g.scalar(bad) > 10.0);
    }

    #[test]
    fn refresh_is_deterministic_and_tracks_updates() {
        let kb = KnowledgeBase::from_json_str(
            r#"[{"name": "a b", "area": "north"}, {"name": "c d", "area": "south"}]"#,
        )
        .unwrap();
        let seqs: Vec<Vec<String>> = kb
            .entities()
            .iter()
            .map(|e| serialize_tokens(e, &kb.schema, None))
            .collect();
        let vocab = Vocab::build(seqs.iter().map(|s| &s[..]), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = TransformerConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_positions: 32,
        };
        let sel = EntitySelector::new(&mut store, vocab.len(), &cfg, 1.0, 32, &mut rng);
        let a = sel.refresh_index(&store, &vocab, &kb);
        let b = sel.refresh_index(&store, &vocab, &kb);
        assert_eq!(a, b);
        let id = store.ids_in_group(ParamGroup::EntitySelector)[0];
        store.value_mut(id).data.iter_mut().for_each(|x| *x += 0.5);
        let c = sel.refresh_index(&store, &vocab, &kb);
        assert_ne!(a.matrix(), c.matrix());
    }
}
