//! The assembled model: shared vocabulary, the three trainable components,
//! the per-turn loss, inference and evaluation.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribute::{accumulate, clip_entities, Accumulation, AttributeSelector, ClipConfig, ClipStrategy};
use crate::config::{Components, RunConfig};
use crate::dialog::{build_context, build_pseudo_labels, ClippedEntity, Dialog, ValueLexicon};
use crate::entity::{distant_label, pretrain_contrastive, EntityIndex, EntityScores, EntitySelector, PretrainExample};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport};
use crate::generator::{CrossAttentionRecord, DecodeMode, Generator};
use crate::kb::{build_kb_view, serialize_tokens, AttributeSchema, Entity, EntityId, KnowledgeBase};
use crate::neural::{Graph, Mat, ParamGroup, ParamStore, Real, Var, Vocab};
use crate::text;

/// Parameter-free descriptions of the three components; the weights live in
/// a [`ParamStore`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MakerModules {
    pub selector: EntitySelector,
    pub attr: AttributeSelector,
    pub generator: Generator,
}

impl MakerModules {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        n_attrs: usize,
        cfg: &RunConfig,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let l = &cfg.lengths;
        let tcfg = cfg.model.transformer(l.entity_max_len);
        let selector = EntitySelector::new(store, vocab_size, &tcfg, cfg.model.selector_out_gain, l.entity_max_len, rng);
        let attr = AttributeSelector::new(store, vocab_size, n_attrs, &tcfg, l.attr_context_len, l.attr_kb_len, rng);
        let generator = Generator::new(
            store,
            vocab_size,
            &tcfg,
            l.gen_context_len,
            l.gen_kb_len,
            l.max_output_len,
            rng,
        );
        Self {
            selector,
            attr,
            generator,
        }
    }
}

/// One training or evaluation turn, with everything the losses need.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnExample {
    pub dialog: usize,
    /// 1-based turn index.
    pub turn: usize,
    pub context: Vec<String>,
    pub response: Vec<String>,
    /// Response positions of KB-related tokens.
    pub kb_positions: Vec<usize>,
    /// Annotated values of the response, when spans exist.
    pub gold_values: Option<BTreeSet<String>>,
    /// Entities this turn may retrieve from.
    pub view: Vec<EntityId>,
}

/// Flattens dialogs into turns. `max_context` bounds the stored context.
pub fn build_examples(
    kb: &KnowledgeBase,
    dialogs: &[Dialog],
    mode: crate::kb::KbMode,
    max_context: usize,
) -> Result<Vec<TurnExample>> {
    let mut out = Vec::new();
    for (d, dialog) in dialogs.iter().enumerate() {
        let view = build_kb_view(kb, dialog, mode)?.ids();
        for (i, turn) in dialog.turns.iter().enumerate() {
            let ctx = build_context(dialog, i + 1, max_context)?;
            let gold_values = (!turn.kb_token_spans.is_empty()).then(|| {
                turn.kb_token_spans
                    .iter()
                    .map(|s| turn.response[s.start..s.end].join("_"))
                    .collect()
            });
            out.push(TurnExample {
                dialog: d,
                turn: i + 1,
                context: ctx.flattened,
                response: turn.response.clone(),
                kb_positions: turn.kb_positions(),
                gold_values,
                view: view.clone(),
            });
        }
    }
    Ok(out)
}

/// Vocabulary over serialized entities and every utterance.
pub fn build_vocab(kb: &KnowledgeBase, dialogs: &[Dialog]) -> Vocab {
    let mut seqs: Vec<Vec<String>> = kb
        .entities()
        .iter()
        .map(|e| serialize_tokens(e, &kb.schema, None))
        .collect();
    for d in dialogs {
        for t in &d.turns {
            seqs.push(t.user.clone());
            seqs.push(t.response.clone());
        }
    }
    Vocab::build(seqs.iter().map(|s| &s[..]), 1)
}

/// Static inputs of the per-turn loss.
#[derive(Clone, Copy, Debug)]
pub struct TurnSetup<'a> {
    pub vocab: &'a Vocab,
    pub schema: &'a AttributeSchema,
    pub components: &'a Components,
    pub clip: ClipConfig,
    /// Selector scores come from the graph and receive gradients.
    pub live_scores: bool,
    /// Add the distillation term.
    pub distill: bool,
}

impl TurnSetup<'_> {
    pub fn accumulation(&self) -> Accumulation {
        if self.components.entity_selection {
            self.clip.accumulation
        } else {
            Accumulation::Average
        }
    }

    pub fn strategy(&self) -> ClipStrategy {
        if self.components.attribute_selection {
            self.clip.strategy
        } else {
            ClipStrategy::All
        }
    }
}

/// Loss nodes of one turn. `total` is the sum of the present terms.
#[derive(Clone, Debug)]
pub struct TurnLosses {
    pub ent: Option<Var>,
    pub att: Option<Var>,
    pub gen: Var,
    pub total: Var,
    pub target: Option<crate::trainer::DistillationTarget>,
    pub records: Vec<CrossAttentionRecord>,
    pub attr_scores: Vec<f64>,
}

/// Builds `L_ent + L_att + L_gen` for one turn over the given candidates.
/// `stale` holds index scores used when the selector is not live.
pub fn turn_losses<T: Real>(
    g: &mut Graph<'_, T>,
    m: &MakerModules,
    setup: &TurnSetup<'_>,
    ex: &TurnExample,
    candidates: &[&Entity],
    stale: Option<&[f64]>,
) -> Result<TurnLosses> {
    let k = candidates.len();
    if k == 0 {
        return Err(Error::Retrieval("no candidate entities".into()));
    }
    let scores = if !setup.components.entity_selection {
        g.constant(Mat::zeros(1, k))
    } else if setup.live_scores {
        let c = m.selector.encode_context(g, setup.vocab, &ex.context);
        let rows: Vec<Var> = candidates
            .iter()
            .map(|e| m.selector.encode_entity(g, setup.vocab, e, setup.schema))
            .collect();
        let ents = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
        g.matmul_bt(c, ents)
    } else {
        let s = stale.ok_or_else(|| Error::Contract("frozen selector needs index scores".into()))?;
        if s.len() != k {
            return Err(Error::Contract(format!("{} scores for {k} candidates", s.len())));
        }
        g.constant(Mat::row_vector(s.iter().map(|&x| T::from_f64_lossy(x)).collect()))
    };

    let per_entity = m.attr.score_attributes(g, setup.vocab, &ex.context, candidates, setup.schema)?;
    let a_t = accumulate(g, per_entity, scores, setup.accumulation())?;
    let attr_scores: Vec<f64> = g.value(a_t).data.iter().map(|x| x.to_f64().unwrap()).collect();
    let owned: Vec<Entity> = candidates.iter().map(|e| (*e).clone()).collect();
    let clipped = clip_entities(&owned, &attr_scores, setup.strategy());

    let att = if setup.components.attribute_selection {
        let b = build_pseudo_labels(&ex.context, &ex.response, &clipped, setup.schema);
        let labels: Vec<T> = b.bits.iter().map(|&x| T::from_f64_lossy(x as f64)).collect();
        Some(g.bce_mean(a_t, &labels))
    } else {
        None
    };

    let fused = m.generator.encode_fused(g, setup.vocab, &ex.context, &clipped, setup.schema)?;
    let (gen, records) = m.generator.gen_loss(g, setup.vocab, &fused, &ex.response, &ex.kb_positions)?;

    let mut target = None;
    let mut ent = None;
    if setup.distill && setup.live_scores && setup.components.entity_selection {
        if let Some(t) = crate::trainer::build_target(&records)? {
            if t.distribution.iter().any(|&c| c < crate::neural::graph::KL_EPS) {
                log::warn!("distillation target has entries below the clamp floor");
            }
            let c: Vec<T> = t.distribution.iter().map(|&x| T::from_f64_lossy(x)).collect();
            ent = Some(g.kl_from_logits(scores, &c));
            target = Some(t);
        }
    }

    let mut total = gen;
    for extra in [att, ent].into_iter().flatten() {
        total = g.add(total, extra);
    }
    Ok(TurnLosses {
        ent,
        att,
        gen,
        total,
        target,
        records,
        attr_scores,
    })
}

/// What the model did on one turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnOutput {
    pub retrieved: Vec<(EntityId, f64)>,
    pub attr_scores: Vec<f64>,
    pub kept_attributes: Vec<String>,
    pub response: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k_list: Vec<usize>,
    /// Decode responses for BLEU and Entity F1; recall only when false.
    pub generate: bool,
    pub decode: DecodeMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k_list: vec![1, 3, 5, 7],
            generate: true,
            decode: DecodeMode::Greedy,
        }
    }
}

/// Vocabulary, schema, module layout, weights and the config that made them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Maker {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub schema: AttributeSchema,
    pub modules: MakerModules,
    pub store: ParamStore<f32>,
}

impl Maker {
    pub fn new(config: RunConfig, kb: &KnowledgeBase, dialogs: &[Dialog]) -> Result<Self> {
        config.validate()?;
        config.backend.ensure_available()?;
        let vocab = build_vocab(kb, dialogs);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let modules = MakerModules::new(&mut store, vocab.len(), kb.schema.len(), &config, &mut rng);
        Ok(Self {
            config,
            vocab,
            schema: kb.schema.clone(),
            modules,
            store,
        })
    }

    pub fn context_budget(&self) -> usize {
        self.config.lengths.context_budget()
    }

    pub fn examples(&self, kb: &KnowledgeBase, dialogs: &[Dialog]) -> Result<Vec<TurnExample>> {
        build_examples(kb, dialogs, self.config.kb_mode, self.context_budget())
    }

    pub fn refresh_index(&self, kb: &KnowledgeBase) -> EntityIndex {
        self.modules.selector.refresh_index(&self.store, &self.vocab, kb)
    }

    pub fn setup(&self, live_scores: bool, distill: bool) -> TurnSetup<'_> {
        TurnSetup {
            vocab: &self.vocab,
            schema: &self.schema,
            components: &self.config.components,
            clip: self.config.train.clip(),
            live_scores,
            distill,
        }
    }

    /// Distant-supervision pre-training of the selector. Turns whose context
    /// and response mention no KB value are skipped. Returns per-epoch loss,
    /// empty when the config has no pre-training section.
    pub fn pretrain(&mut self, kb: &KnowledgeBase, examples: &[TurnExample]) -> Result<Vec<f64>> {
        let Some(cfg) = self.config.pretrain.clone() else {
            return Ok(Vec::new());
        };
        let data: Vec<PretrainExample> = examples
            .iter()
            .filter_map(|ex| {
                distant_label(kb, &ex.context, &ex.response).map(|label| PretrainExample {
                    context: ex.context.clone(),
                    label,
                })
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        let selector = self.modules.selector.clone();
        pretrain_contrastive(&selector, &mut self.store, &self.vocab, kb, &data, &cfg, &mut rng)
    }

    /// Selector ranking of the view, best first, at most `k` entries.
    pub fn rank<S: AsRef<str>>(&self, index: &EntityIndex, context: &[S], view: &[EntityId], k: usize) -> Result<EntityScores> {
        let ctx = self.modules.selector.context_vector(&self.store, &self.vocab, context);
        index.search_within(&ctx, k, view)
    }

    /// Candidates and their raw scores for a turn: the top-K when entity
    /// selection is on, otherwise the whole view with zero scores.
    pub fn candidates<S: AsRef<str>>(
        &self,
        kb: &KnowledgeBase,
        index: &EntityIndex,
        context: &[S],
        view: &[EntityId],
    ) -> Result<EntityScores> {
        if self.config.components.entity_selection {
            self.rank(index, context, view, self.config.train.top_k)
        } else {
            let pairs = view
                .iter()
                .map(|&id| kb.get(id).map(|_| (id, 0.0)).ok_or(Error::Lookup(id.0)))
                .collect::<Result<Vec<_>>>()?;
            if pairs.is_empty() {
                return Err(Error::Retrieval("empty KB view".into()));
            }
            Ok(EntityScores::from_pairs(pairs))
        }
    }

    /// Accumulated attribute importance `a_t`.
    pub fn attribute_scores<S: AsRef<str>>(&self, context: &[S], entities: &[&Entity], scores: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.store);
        let per_entity = self
            .modules
            .attr
            .score_attributes(&mut g, &self.vocab, context, entities, &self.schema)?;
        let s = g.constant(Mat::row_vector(scores.iter().map(|&x| x as f32).collect()));
        let a = accumulate(&mut g, per_entity, s, self.setup(false, false).accumulation())?;
        Ok(g.value(a).data.iter().map(|&x| x as f64).collect())
    }

    /// Retrieve, clip and (optionally) generate for one context.
    pub fn respond<S: AsRef<str>>(
        &self,
        kb: &KnowledgeBase,
        index: &EntityIndex,
        context: &[S],
        view: &[EntityId],
        decode: Option<DecodeMode>,
    ) -> Result<TurnOutput> {
        let cands = self.candidates(kb, index, context, view)?;
        let entities: Vec<&Entity> = cands
            .ids()
            .iter()
            .map(|&id| kb.get(id).ok_or(Error::Lookup(id.0)))
            .collect::<Result<_>>()?;
        let attr_scores = self.attribute_scores(context, &entities, &cands.raw())?;
        let owned: Vec<Entity> = entities.iter().map(|e| (*e).clone()).collect();
        let clipped: Vec<ClippedEntity> = clip_entities(&owned, &attr_scores, self.setup(false, false).strategy());
        let kept_attributes = clipped
            .first()
            .map(|c| c.mask.kept_names(&self.schema).into_iter().map(str::to_string).collect())
            .unwrap_or_default();
        let response = match decode {
            Some(mode) => self
                .modules
                .generator
                .generate(&self.store, &self.vocab, context, &clipped, &self.schema, mode)?,
            None => Vec::new(),
        };
        Ok(TurnOutput {
            retrieved: cands.pairs.clone(),
            attr_scores,
            kept_attributes,
            response,
        })
    }

    /// Metrics over `examples`. Also returns the generated responses (empty
    /// when generation is off).
    pub fn evaluate(
        &self,
        kb: &KnowledgeBase,
        index: &EntityIndex,
        examples: &[TurnExample],
        opts: &EvalOptions,
    ) -> Result<(MetricReport, Vec<Vec<String>>)> {
        if examples.is_empty() {
            return Err(Error::Metric("no evaluation turns".into()));
        }
        let max_k = opts.k_list.iter().copied().max().unwrap_or(1).max(1);
        let mut rankings = Vec::with_capacity(examples.len());
        let mut suggested = Vec::with_capacity(examples.len());
        let mut predictions = Vec::new();
        for ex in examples {
            rankings.push(self.rank(index, &ex.context, &ex.view, max_k)?.ids());
            suggested.push(suggested_in_view(kb, &ex.response, &ex.view));
            if opts.generate {
                predictions.push(self.respond(kb, index, &ex.context, &ex.view, Some(opts.decode))?.response);
            }
        }
        let mut report = MetricReport {
            turns: examples.len(),
            ..Default::default()
        };
        if suggested.iter().any(|s| !s.is_empty()) {
            for &k in &opts.k_list {
                report.recall_at_k.insert(k, eval::recall_at_k(&rankings, &suggested, k)?);
            }
        }
        if opts.generate {
            let refs: Vec<Vec<String>> = examples.iter().map(|e| e.response.clone()).collect();
            let b = eval::bleu(&predictions, &refs)?;
            report.bleu = b.smoothed;
            report.bleu_raw = b.raw;
            let lexicon = ValueLexicon::from_kb(kb);
            let (gold, source) = gold_value_sets(examples, &lexicon);
            report.gold_source = source.into();
            report.entity_f1 = eval::entity_f1(&predictions, &gold, &lexicon)?;
        }
        Ok((report, predictions))
    }
}

/// Suggested entities restricted to a view.
pub fn suggested_in_view(kb: &KnowledgeBase, response: &[String], view: &[EntityId]) -> Vec<EntityId> {
    eval::suggested_entities(kb, response)
        .into_iter()
        .filter(|id| view.contains(id))
        .collect()
}

/// Gold values from span annotations when the corpus has any, otherwise from
/// lexicon matches in the references.
pub fn gold_value_sets(examples: &[TurnExample], lexicon: &ValueLexicon) -> (Vec<BTreeSet<String>>, &'static str) {
    if examples.iter().any(|e| e.gold_values.is_some()) {
        let sets = examples.iter().map(|e| e.gold_values.clone().unwrap_or_default()).collect();
        (sets, "annotations")
    } else {
        let refs: Vec<Vec<String>> = examples.iter().map(|e| e.response.clone()).collect();
        (eval::gold_values_from_references(&refs, lexicon), "references")
    }
}

/// Recall@k of a lexical baseline over the same turns.
pub fn baseline_recall(
    kind: eval::RetrieverKind,
    kb: &KnowledgeBase,
    dialogs: &[Dialog],
    examples: &[TurnExample],
    k_list: &[usize],
) -> Result<std::collections::BTreeMap<usize, f64>> {
    let max_k = k_list.iter().copied().max().unwrap_or(1).max(1);
    let mut rankings = Vec::with_capacity(examples.len());
    let mut suggested = Vec::with_capacity(examples.len());
    for ex in examples {
        let view = kb.subset(&ex.view)?;
        rankings.push(eval::baseline_retrieve(
            kind,
            &ex.context,
            &view,
            dialogs.get(ex.dialog),
            max_k,
        )?);
        suggested.push(suggested_in_view(kb, &ex.response, &ex.view));
    }
    k_list
        .iter()
        .map(|&k| Ok((k, eval::recall_at_k(&rankings, &suggested, k)?)))
        .collect()
}

/// Tokens of a free-text query, as fed to the selector.
pub fn query_tokens(text_in: &str) -> Vec<String> {
    let toks = text::tokenize(text_in);
    if toks.first().map(String::as_str) == Some(crate::dialog::USER_MARKER) {
        toks
    } else {
        std::iter::once(crate::dialog::USER_MARKER.to_string()).chain(toks).collect()
    }
}

/// Groups trained in a given configuration.
pub fn trainable_groups(selector: bool) -> Vec<ParamGroup> {
    let mut g = vec![ParamGroup::AttributeSelector, ParamGroup::Generator];
    if selector {
        g.insert(0, ParamGroup::EntitySelector);
    }
    g
}
