//! End-to-end runs on the generated corpus with the desk preset.

use maker_core::config::RunConfig;
use maker_core::generator::DecodeMode;
use maker_core::maker::{suggested_in_view, EvalOptions, Maker};
use maker_core::repro::{ablation, prepare, ReproOptions};
use maker_core::text::{contains_run, tokenize};
use maker_core::trainer::{fit, FitOptions, Trainer};

const DESK: &str = include_str!("../../../presets/synthetic_desk.toml");

fn recall_only(k: usize) -> EvalOptions {
    EvalOptions {
        k_list: vec![k],
        generate: false,
        ..Default::default()
    }
}

#[test]
fn pretraining_then_training_on_the_generated_corpus() {
    let cfg = RunConfig::from_toml_str(DESK).unwrap();
    let opts = ReproOptions {
        seed: 0,
        generate: false,
        ..Default::default()
    };
    let p = prepare(&cfg, &opts).unwrap();
    let kb = &p.corpus.kb;

    // Pre-training beats the untrained encoder on held-out turns.
    let untrained = Maker::new(p.pretrained.config.clone(), kb, &p.corpus.dialogs).unwrap();
    let before = Trainer::new(untrained, kb.clone()).evaluate(&p.test, &recall_only(1)).unwrap();
    let after = Trainer::new(p.pretrained.clone(), kb.clone()).evaluate(&p.test, &recall_only(1)).unwrap();
    assert!(
        after.recall_at_k[&1] > before.recall_at_k[&1],
        "Recall@1 untrained {} vs pre-trained {}",
        before.recall_at_k[&1],
        after.recall_at_k[&1]
    );

    // After training, responses on held-out turns name the suggested entity.
    let mut trainer = Trainer::new(p.pretrained.clone(), kb.clone());
    let outcome = fit(&mut trainer, &p.train, &p.valid, &FitOptions::default()).unwrap();
    assert!(outcome.aborted.is_none());
    assert_eq!(outcome.history.len(), cfg.train.total_steps);
    let best = Trainer::from_checkpoint(outcome.best, kb.clone());
    let (mut named, mut counted) = (0, 0);
    for ex in &p.test {
        let Some(&gold) = suggested_in_view(kb, &ex.response, &ex.view).first() else {
            continue;
        };
        let name = tokenize(kb.get(gold).unwrap().value("name").unwrap());
        let out = best
            .maker
            .respond(kb, &best.index, &ex.context, &ex.view, Some(DecodeMode::Greedy))
            .unwrap();
        counted += 1;
        named += contains_run(&out.response, &name) as usize;
    }
    assert!(
        named * 100 >= counted * 80,
        "gold name generated in {named} of {counted} turns"
    );
}

#[test]
fn ablation_table_is_deterministic_and_consistent() {
    let mut cfg = RunConfig::from_toml_str(DESK).unwrap();
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    cfg.model.n_layers = 1;
    cfg.model.n_heads = 2;
    cfg.train.total_steps = 12;
    cfg.train.distill_start = 4;
    cfg.train.refresh_interval = 4;
    cfg.train.grad_accum = 1;
    if let Some(p) = cfg.pretrain.as_mut() {
        p.epochs = 1;
    }
    let opts = ReproOptions {
        seed: 3,
        n_entities: 30,
        n_dialogs: 40,
        generate: true,
        k_list: vec![1, 5],
        ..Default::default()
    };
    let a = ablation(&cfg, &opts).unwrap();
    let b = ablation(&cfg, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_tsv(), b.to_tsv());
    let systems: Vec<&str> = a.rows.iter().map(|r| r.system.as_str()).collect();
    assert_eq!(
        systems,
        ["maker", "w/o distillation", "w/o attribute selection", "frequency", "bm25"]
    );

    // Without distillation the selector never moves, so its recall is the
    // pre-trained selector's.
    let p = prepare(&cfg, &opts).unwrap();
    let frozen = Trainer::new(p.pretrained.clone(), p.corpus.kb.clone())
        .evaluate(&p.test, &recall_only(5))
        .unwrap();
    assert_eq!(a.row("w/o distillation").unwrap().recall_at_k[&5], frozen.recall_at_k[&5]);
    assert!(a.row("maker").unwrap().entity_f1.is_some());
    assert!(a.row("frequency").unwrap().entity_f1.is_none());
}
