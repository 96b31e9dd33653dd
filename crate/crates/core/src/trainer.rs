//! Two-stage training. The warm-up stage trains the attribute selector and
//! generator against a frozen retriever; the distillation stage adds the KL
//! term that pulls selector scores towards the generator's accumulated
//! cross-attention.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entity::EntityIndex;
use crate::error::{io_err, Error, Result};
use crate::eval::MetricReport;
use crate::generator::CrossAttentionRecord;
use crate::kb::{Entity, KnowledgeBase};
use crate::maker::{trainable_groups, turn_losses, EvalOptions, Maker, TurnExample};
use crate::neural::graph::KL_EPS;
use crate::neural::optim::linear_decay;
use crate::neural::tensor::softmax;
use crate::neural::{AdamW, GradBuffer, Graph, ParamGroup};

/// Teacher distribution over the K retrieved entities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationTarget {
    /// `ĉ_i`: summed attention mass on entity `i`.
    pub accumulated: Vec<f64>,
    pub distribution: Vec<f64>,
}

/// Sums each record over entity tokens, KB steps and layers, then
/// softmaxes. `None` when the response has no KB-related tokens.
pub fn build_target(records: &[CrossAttentionRecord]) -> Result<Option<DistillationTarget>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Contract("no attention records".into()))?;
    let (_, m, l) = first.shape();
    if let Some(bad) = records.iter().find(|r| r.kb_steps != m || r.layers != l) {
        return Err(Error::Contract(format!(
            "record shape {:?} disagrees with {m} steps x {l} layers",
            bad.shape()
        )));
    }
    if m == 0 {
        return Ok(None);
    }
    let accumulated: Vec<f64> = records.iter().map(|r| r.data.iter().sum()).collect();
    let distribution = softmax(&accumulated);
    Ok(Some(DistillationTarget {
        accumulated,
        distribution,
    }))
}

/// `KL(s ‖ c)` on plain values, `0 · log 0 = 0`, `c` floored at 1e-9.
pub fn kl_loss(selector_dist: &[f64], target: &DistillationTarget) -> Result<f64> {
    if selector_dist.len() != target.distribution.len() {
        return Err(Error::Loss(format!(
            "{} selector entries for {} target entries",
            selector_dist.len(),
            target.distribution.len()
        )));
    }
    let mut clamped = false;
    let kl = selector_dist
        .iter()
        .zip(&target.distribution)
        .filter(|(&s, _)| s > 0.0)
        .map(|(&s, &c)| {
            if c < KL_EPS {
                clamped = true;
            }
            s * (s.ln() - c.max(KL_EPS).ln())
        })
        .sum();
    if clamped {
        log::warn!("KL target clamped at {KL_EPS}");
    }
    Ok(kl)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Distill,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Self::Warmup),
            "distill" => Ok(Self::Distill),
            other => Err(Error::Config(format!("unknown stage {other:?}; use warmup or distill"))),
        }
    }
}

/// Mean per-example losses of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub stage: Stage,
    pub ent: f64,
    pub att: f64,
    pub gen: f64,
    pub total: f64,
    pub examples: usize,
    /// Turns that contributed a KL term.
    pub distilled: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub maker: Maker,
    pub optimizer: AdamW<f32>,
    pub step: usize,
    pub metrics: Option<MetricReport>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&src).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Owns the model, optimizer and index for one training run.
pub struct Trainer {
    pub maker: Maker,
    pub kb: KnowledgeBase,
    pub index: EntityIndex,
    pub optimizer: AdamW<f32>,
    pub step: usize,
    /// Forces one stage regardless of the schedule.
    pub stage_override: Option<Stage>,
    /// Selector weights changed since the index was built.
    selector_dirty: bool,
}

impl Trainer {
    pub fn new(maker: Maker, kb: KnowledgeBase) -> Self {
        let index = maker.refresh_index(&kb);
        let optimizer = AdamW::new(maker.config.train.optimizer());
        Self {
            maker,
            kb,
            index,
            optimizer,
            step: 0,
            stage_override: None,
            selector_dirty: false,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, kb: KnowledgeBase) -> Self {
        let mut t = Self::new(ck.maker, kb);
        t.optimizer = ck.optimizer;
        t.step = ck.step;
        t
    }

    pub fn checkpoint(&self, metrics: Option<MetricReport>) -> Checkpoint {
        Checkpoint {
            maker: self.maker.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            metrics,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage_override.unwrap_or(if self.step < self.maker.config.train.distill_start {
            Stage::Warmup
        } else {
            Stage::Distill
        })
    }

    /// Whether the selector learns at the current step.
    pub fn selector_trainable(&self) -> bool {
        let c = &self.maker.config.components;
        self.stage() == Stage::Distill && c.distillation && c.entity_selection
    }

    fn lr(&self, group: ParamGroup) -> f64 {
        let t = &self.maker.config.train;
        let base = match group {
            ParamGroup::EntitySelector => t.lr_entity,
            ParamGroup::AttributeSelector => t.lr_attribute,
            ParamGroup::Generator => t.lr_generator,
        };
        base * linear_decay(self.step, t.total_steps)
    }

    fn candidates(&self, ex: &TurnExample) -> Result<(Vec<&Entity>, Vec<f64>)> {
        let scores = self.maker.candidates(&self.kb, &self.index, &ex.context, &ex.view)?;
        let ents = scores
            .ids()
            .iter()
            .map(|&id| self.kb.get(id).ok_or(Error::Lookup(id.0)))
            .collect::<Result<_>>()?;
        Ok((ents, scores.raw()))
    }

    /// One optimizer step over `batch`, gradients averaged per example.
    /// Nothing is updated when a loss is non-finite.
    pub fn train_step(&mut self, batch: &[TurnExample]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let stage = self.stage();
        let live = self.selector_trainable();
        let groups = trainable_groups(live);
        let setup = self.maker.setup(live, true);
        let mut buffer = GradBuffer::default();
        let mut report = LossReport {
            step: self.step,
            stage,
            ent: 0.0,
            att: 0.0,
            gen: 0.0,
            total: 0.0,
            examples: batch.len(),
            distilled: 0,
            grad_norm: 0.0,
        };
        for ex in batch {
            let (cands, stale) = self.candidates(ex)?;
            let mut g = Graph::new(&self.maker.store, &groups);
            let losses = turn_losses(&mut g, &self.maker.modules, &setup, ex, &cands, Some(&stale))?;
            let value = |v: Option<crate::neural::Var>| v.map_or(0.0, |v| g.scalar(v) as f64);
            let (ent, att, gen, total) = (
                value(losses.ent),
                value(losses.att),
                value(Some(losses.gen)),
                value(Some(losses.total)),
            );
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    detail: format!(
                        "dialog {} turn {}: ent {ent} att {att} gen {gen}",
                        ex.dialog, ex.turn
                    ),
                });
            }
            report.ent += ent;
            report.att += att;
            report.gen += gen;
            report.total += total;
            report.distilled += losses.ent.is_some() as usize;
            let grads = g.backward(losses.total);
            buffer.add(g.param_grads(&grads), 1)?;
        }
        let n = batch.len() as f64;
        report.ent /= n;
        report.att /= n;
        report.gen /= n;
        report.total /= n;
        let grads = buffer.take_mean();
        if grads.iter().any(|(_, m)| !m.all_finite()) {
            return Err(Error::NonFinite {
                step: self.step,
                detail: "gradient".into(),
            });
        }
        let rates: Vec<(ParamGroup, f64)> = ParamGroup::ALL.iter().map(|&gr| (gr, self.lr(gr))).collect();
        let lr = |gr: ParamGroup| {
            if groups.contains(&gr) {
                rates.iter().find(|r| r.0 == gr).map_or(0.0, |r| r.1)
            } else {
                0.0
            }
        };
        report.grad_norm = self.optimizer.step(&mut self.maker.store, &grads, lr);
        if live {
            self.selector_dirty = true;
        }
        self.step += 1;
        self.index.staleness += 1;
        if self.step.is_multiple_of(self.maker.config.train.refresh_interval) {
            self.refresh();
        }
        Ok(report)
    }

    /// Re-encodes the KB; skipped in value when the selector has not moved.
    pub fn refresh(&mut self) {
        if self.selector_dirty {
            self.index = self.maker.refresh_index(&self.kb);
            self.selector_dirty = false;
        }
        self.index.staleness = 0;
    }

    pub fn evaluate(&self, examples: &[TurnExample], opts: &EvalOptions) -> Result<MetricReport> {
        // Evaluation always sees a fresh index.
        let index = if self.selector_dirty {
            self.maker.refresh_index(&self.kb)
        } else {
            self.index.clone()
        };
        Ok(self.maker.evaluate(&self.kb, &index, examples, opts)?.0)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub eval: EvalOptions,
    /// Where to write `best.json` and diagnostic dumps.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub history: Vec<LossReport>,
    pub evals: Vec<(usize, MetricReport)>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

/// Validation score used for checkpoint selection: Entity F1 when responses
/// are generated, else recall at the largest k.
pub fn selection_score(report: &MetricReport, opts: &EvalOptions) -> f64 {
    if opts.generate {
        report.entity_f1
    } else {
        report.recall_at_k.values().next_back().copied().unwrap_or(0.0)
    }
}

/// Runs the remaining schedule, evaluating every `eval_interval` steps and at
/// the end, and returns the best checkpoint by validation score.
pub fn fit(trainer: &mut Trainer, train: &[TurnExample], valid: &[TurnExample], opts: &FitOptions) -> Result<FitOutcome> {
    if valid.is_empty() {
        return Err(Error::Contract("validation split is empty".into()));
    }
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let cfg = trainer.maker.config.train.clone();
    let per_step = cfg.examples_per_step();
    let mut history = Vec::new();
    let mut evals = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut aborted = None;

    let seed = trainer.maker.config.seed;
    let order_for = |epoch: usize| {
        let mut o: Vec<usize> = (0..train.len()).collect();
        o.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64 * 7919)));
        o
    };
    let mut consider = |trainer: &Trainer, evals: &mut Vec<(usize, MetricReport)>| -> Result<()> {
        let report = trainer.evaluate(valid, &opts.eval)?;
        let score = selection_score(&report, &opts.eval);
        log::info!("step {} validation score {score:.3}", trainer.step);
        evals.push((trainer.step, report.clone()));
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            let ck = trainer.checkpoint(Some(report));
            if let Some(dir) = &opts.checkpoint_dir {
                ck.save(dir.join("best.json"))?;
            }
            best = Some((score, ck));
        }
        Ok(())
    };

    let mut cached: (usize, Vec<usize>) = (0, order_for(0));
    while trainer.step < cfg.total_steps {
        let start = trainer.step * per_step;
        let mut batch = Vec::with_capacity(per_step);
        for i in start..start + per_step {
            let epoch = i / train.len();
            if cached.0 != epoch {
                cached = (epoch, order_for(epoch));
            }
            batch.push(train[cached.1[i % train.len()]].clone());
        }
        match trainer.train_step(&batch) {
            Ok(r) => {
                log::debug!("step {} total {:.4}", r.step, r.total);
                history.push(r);
            }
            Err(Error::NonFinite { step, detail }) => {
                let msg = format!("non-finite values at step {step}: {detail}");
                log::error!("{msg}");
                if let Some(dir) = &opts.checkpoint_dir {
                    let dump = serde_json::json!({ "error": msg, "recent_losses": history.iter().rev().take(20).collect::<Vec<_>>() });
                    let path = dir.join("diagnostic.json");
                    std::fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(io_err(&path))?;
                }
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
        if cfg.eval_interval > 0 && trainer.step.is_multiple_of(cfg.eval_interval) && trainer.step < cfg.total_steps {
            consider(trainer, &mut evals)?;
        }
    }
    consider(trainer, &mut evals)?;
    let best = best.map(|b| b.1).expect("evaluated at least once");
    Ok(FitOutcome {
        best,
        history,
        evals,
        aborted,
    })
}
