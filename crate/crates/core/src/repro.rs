//! Desk-scale reproductions on the generated corpus: the component ablation
//! and the KB-size sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dialog::synthetic::{generate_synthetic_corpus, SchemaSpec};
use crate::dialog::Dialog;
use crate::error::{Error, Result};
use crate::eval::RetrieverKind;
use crate::kb::{KbMode, KnowledgeBase};
use crate::maker::{baseline_recall, EvalOptions, Maker, TurnExample};
use crate::trainer::{fit, FitOptions, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproOptions {
    pub seed: u64,
    pub n_entities: usize,
    pub n_dialogs: usize,
    /// Fractions of dialogs used for training and validation; the rest is
    /// the test split.
    pub train_frac: f64,
    pub valid_frac: f64,
    /// Decode responses for BLEU and Entity F1.
    pub generate: bool,
    pub k_list: Vec<usize>,
}

impl Default for ReproOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 200,
            n_dialogs: 500,
            train_frac: 0.8,
            valid_frac: 0.1,
            generate: true,
            k_list: vec![1, 3, 5, 7],
        }
    }
}

/// Generated corpus with its dialog-level split.
pub struct SplitCorpus {
    pub kb: KnowledgeBase,
    pub dialogs: Vec<Dialog>,
    pub train: Vec<Dialog>,
    pub valid: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

pub fn synthetic_split(opts: &ReproOptions) -> Result<SplitCorpus> {
    let (kb, dialogs) = generate_synthetic_corpus(opts.seed, opts.n_entities, opts.n_dialogs, &SchemaSpec::default())?;
    let n = dialogs.len();
    let n_train = ((n as f64) * opts.train_frac).round() as usize;
    let n_valid = ((n as f64) * opts.valid_frac).round() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(Error::Config(format!(
            "split {n_train}/{n_valid} of {n} dialogs leaves an empty part"
        )));
    }
    Ok(SplitCorpus {
        train: dialogs[..n_train].to_vec(),
        valid: dialogs[n_train..n_train + n_valid].to_vec(),
        test: dialogs[n_train + n_valid..].to_vec(),
        kb,
        dialogs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub system: String,
    pub entity_f1: Option<f64>,
    pub bleu: Option<f64>,
    pub recall_at_k: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproTable {
    pub seed: u64,
    pub config_fingerprint: String,
    pub rows: Vec<AblationRow>,
}

impl ReproTable {
    pub fn row(&self, system: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.system == system)
    }

    pub fn to_tsv(&self) -> String {
        let ks: Vec<usize> = self
            .rows
            .iter()
            .flat_map(|r| r.recall_at_k.keys().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut out = String::from("system\tentity_f1\tbleu");
        for k in &ks {
            let _ = write!(out, "\trecall@{k}");
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        for r in &self.rows {
            let _ = write!(out, "{}\t{}\t{}", r.system, cell(r.entity_f1), cell(r.bleu));
            for k in &ks {
                let _ = write!(out, "\t{}", cell(r.recall_at_k.get(k).copied()));
            }
            out.push('\n');
        }
        out
    }
}

/// Prepared corpus, examples and a pre-trained model shared by all variants.
pub struct Prepared {
    pub corpus: SplitCorpus,
    pub pretrained: Maker,
    pub train: Vec<TurnExample>,
    pub valid: Vec<TurnExample>,
    pub test: Vec<TurnExample>,
}

pub fn prepare(config: &RunConfig, opts: &ReproOptions) -> Result<Prepared> {
    let corpus = synthetic_split(opts)?;
    let mut config = config.clone();
    config.seed = opts.seed;
    let mut maker = Maker::new(config, &corpus.kb, &corpus.dialogs)?;
    let train = maker.examples(&corpus.kb, &corpus.train)?;
    let valid = maker.examples(&corpus.kb, &corpus.valid)?;
    let test = maker.examples(&corpus.kb, &corpus.test)?;
    maker.pretrain(&corpus.kb, &train)?;
    Ok(Prepared {
        corpus,
        pretrained: maker,
        train,
        valid,
        test,
    })
}

fn eval_options(opts: &ReproOptions) -> EvalOptions {
    EvalOptions {
        k_list: opts.k_list.clone(),
        generate: opts.generate,
        ..Default::default()
    }
}

/// Trains one variant from the shared pre-trained weights and scores the
/// best checkpoint on the test split.
pub fn run_variant(p: &Prepared, name: &str, edit: impl FnOnce(&mut RunConfig), opts: &ReproOptions) -> Result<AblationRow> {
    let mut maker = p.pretrained.clone();
    edit(&mut maker.config);
    maker.config.validate()?;
    let mut trainer = Trainer::new(maker, p.corpus.kb.clone());
    let eval = eval_options(opts);
    let outcome = fit(
        &mut trainer,
        &p.train,
        &p.valid,
        &FitOptions {
            eval: eval.clone(),
            checkpoint_dir: None,
        },
    )?;
    if let Some(msg) = &outcome.aborted {
        log::warn!("{name}: {msg}");
    }
    let best = Trainer::from_checkpoint(outcome.best, p.corpus.kb.clone());
    let report = best.evaluate(&p.test, &eval)?;
    Ok(AblationRow {
        system: name.into(),
        entity_f1: opts.generate.then_some(report.entity_f1),
        bleu: opts.generate.then_some(report.bleu),
        recall_at_k: report.recall_at_k,
    })
}

/// Full system, the two ablations, and the lexical retrieval baselines.
pub fn ablation(config: &RunConfig, opts: &ReproOptions) -> Result<ReproTable> {
    let p = prepare(config, opts)?;
    let mut rows = vec![
        run_variant(&p, "maker", |_| {}, opts)?,
        run_variant(&p, "w/o distillation", |c| c.components.distillation = false, opts)?,
        run_variant(&p, "w/o attribute selection", |c| c.components.attribute_selection = false, opts)?,
    ];
    for (name, kind) in [("frequency", RetrieverKind::Frequency), ("bm25", RetrieverKind::Bm25)] {
        rows.push(AblationRow {
            system: name.into(),
            entity_f1: None,
            bleu: None,
            recall_at_k: baseline_recall(kind, &p.corpus.kb, &p.corpus.test, &p.test, &opts.k_list)?,
        });
    }
    Ok(ReproTable {
        seed: opts.seed,
        config_fingerprint: config.fingerprint(),
        rows,
    })
}

/// The full system trained and tested once per KB mode.
pub fn kb_mode_sweep(config: &RunConfig, modes: &[KbMode], opts: &ReproOptions) -> Result<ReproTable> {
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut cfg = config.clone();
        cfg.kb_mode = mode;
        let p = prepare(&cfg, opts)?;
        rows.push(run_variant(&p, mode.as_str(), |_| {}, opts)?);
    }
    Ok(ReproTable {
        seed: opts.seed,
        config_fingerprint: config.fingerprint(),
        rows,
    })
}
