use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use maker_core::config::{hex_digest, RunConfig};
use maker_core::dialog::synthetic::{generate_synthetic_corpus, SchemaSpec};
use maker_core::dialog::{annotate_with, parse_dialogs, save_dialogs, Dialog, ValueLexicon};
use maker_core::entity::EntityIndex;
use maker_core::eval::{self, MetricReport};
use maker_core::generator::DecodeMode;
use maker_core::kb::{self, build_kb_view, EntityId, KbMode, KnowledgeBase};
use maker_core::maker::{build_examples, gold_value_sets, query_tokens, suggested_in_view, EvalOptions, Maker, TurnExample};
use maker_core::neural::AdamW;
use maker_core::repro::{ablation, kb_mode_sweep, ReproOptions, ReproTable};
use maker_core::text::tokenize;
use maker_core::trainer::{fit, Checkpoint, FitOptions, Trainer};
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::Run;
use crate::{AttrsCmd, Cli, Command, CorpusArgs, DataCmd, EvalArgs, EvalCmd, Global, KbCmd, ReproCmd, TrainArgs, DEFAULT_PRESET};

pub fn dispatch(cli: &Cli, run: &mut Run) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Kb(KbCmd::Stats { path }) => {
            let kb = load_kb(run, path)?;
            print_json(&kb::stats(&kb))
        }
        Command::Kb(KbCmd::View { kb, dialogs, mode, dialog }) => {
            let kb = load_kb(run, kb)?;
            let dialogs = load_dialogs(run, dialogs)?;
            let d = dialogs
                .get(*dialog)
                .ok_or_else(|| anyhow!("dialog {dialog} out of range (file has {})", dialogs.len()))?;
            let mode = mode.or(g.kb_mode).unwrap_or(KbMode::Condensed);
            print_json(&build_kb_view(&kb, d, mode)?.to_json_value())
        }
        Command::Data(DataCmd::Synth { entities, dialogs, out }) => synth(g, run, *entities, *dialogs, out),
        Command::Data(DataCmd::Annotate { kb, dialogs, out }) => annotate(run, kb, dialogs, out.as_deref()),
        Command::Pretrain { kb, dialogs, out } => pretrain(g, run, kb, dialogs, out),
        Command::Train(args) => train(g, run, args),
        Command::Retrieve {
            checkpoint,
            kb,
            query_file,
            k,
        } => retrieve(run, checkpoint, kb, query_file, *k),
        Command::Generate {
            checkpoint,
            kb,
            dialogs,
            mode,
            beam,
        } => generate(run, checkpoint, kb, dialogs, *mode, *beam),
        Command::Attrs(AttrsCmd::Inspect { checkpoint, kb, dialogs }) => inspect_attrs(run, checkpoint, kb, dialogs),
        Command::Eval(e) => match &e.sweep {
            Some(EvalCmd::Sweep { modes, corpus }) => {
                let cfg = load_config(g, run)?;
                let table = kb_mode_sweep(&cfg, modes, &repro_options(&cfg, corpus))?;
                emit_table(&table, corpus.json)
            }
            None => evaluate(g, run, &e.files),
        },
        Command::Repro(ReproCmd::Ablation { corpus }) => {
            let cfg = load_config(g, run)?;
            let table = ablation(&cfg, &repro_options(&cfg, corpus))?;
            emit_table(&table, corpus.json)
        }
    }
}

fn print_json<T: Serialize + ?Sized>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Preset (or built-in default) with command-line overrides applied.
fn load_config(g: &Global, run: &mut Run) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let bytes = run.read(path)?;
            let src = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
            RunConfig::from_toml_str(&src).with_context(|| format!("config {}", path.display()))?
        }
        None => RunConfig::from_toml_str(DEFAULT_PRESET).context("built-in preset")?,
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(b) = g.backend {
        cfg.backend = b;
    }
    if let Some(m) = g.kb_mode {
        cfg.kb_mode = m;
    }
    cfg.validate()?;
    cfg.backend.ensure_available()?;
    run.config(&cfg);
    Ok(cfg)
}

fn text_input(run: &mut Run, path: &Path) -> Result<String> {
    String::from_utf8(run.read(path)?).with_context(|| format!("{} is not UTF-8", path.display()))
}

fn load_kb(run: &mut Run, path: &Path) -> Result<KnowledgeBase> {
    let src = text_input(run, path)?;
    KnowledgeBase::from_json_str(&src).with_context(|| format!("knowledge base {}", path.display()))
}

fn load_dialogs(run: &mut Run, path: &Path) -> Result<Vec<Dialog>> {
    let src = text_input(run, path)?;
    parse_dialogs(&src).with_context(|| format!("dialogs {}", path.display()))
}

fn load_checkpoint(run: &mut Run, path: &Path) -> Result<Checkpoint> {
    let bytes = run.read(path)?;
    let ck: Checkpoint = serde_json::from_slice(&bytes).with_context(|| format!("checkpoint {}", path.display()))?;
    run.config(&ck.maker.config);
    Ok(ck)
}

/// Entity index for a checkpoint and KB, cached under the cache dir by the
/// hashes of both inputs.
fn cached_index(run: &mut Run, maker: &Maker, kb: &KnowledgeBase, ck: &Path, kb_path: &Path) -> Result<EntityIndex> {
    let key = format!(
        "{}{}",
        run.input_hash(ck).unwrap_or_default(),
        run.input_hash(kb_path).unwrap_or_default()
    );
    let path = run.cache_dir.join(format!("index-{}.bin", &hex_digest(key.as_bytes())[..16]));
    if let Ok(index) = EntityIndex::load(&path) {
        log::info!("using cached index {}", path.display());
        return Ok(index);
    }
    let index = maker.refresh_index(kb);
    std::fs::create_dir_all(&run.cache_dir).with_context(|| format!("creating {}", run.cache_dir.display()))?;
    index.save(&path)?;
    Ok(index)
}

fn turn_id(dialogs: &[Dialog], ex: &TurnExample) -> String {
    match dialogs.get(ex.dialog).and_then(|d| d.id.as_deref()) {
        Some(id) => format!("{id}:{}", ex.turn),
        None => format!("{}:{}", ex.dialog, ex.turn),
    }
}

fn synth(g: &Global, run: &mut Run, entities: usize, dialogs: usize, out: &Path) -> Result<()> {
    let seed = g.seed.unwrap_or(0);
    run.seed(seed);
    let (kb, corpus) = generate_synthetic_corpus(seed, entities, dialogs, &SchemaSpec::default())?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    run.place_in(out);
    let kb_path = out.join("kb.json");
    kb.save(&kb_path)?;
    run.wrote(&kb_path);
    let dialog_path = out.join("dialogs.json");
    save_dialogs(&dialog_path, &corpus)?;
    run.wrote(&dialog_path);
    print_json(&json!({
        "seed": seed,
        "entities": kb.len(),
        "dialogs": corpus.len(),
        "turns": corpus.iter().map(|d| d.turns.len()).sum::<usize>(),
    }))
}

fn annotate(run: &mut Run, kb: &Path, dialogs: &Path, out: Option<&Path>) -> Result<()> {
    let kb = load_kb(run, kb)?;
    let mut dialogs = load_dialogs(run, dialogs)?;
    let lexicon = ValueLexicon::from_kb(&kb);
    for d in &mut dialogs {
        for t in &mut d.turns {
            *t = annotate_with(t, &lexicon);
        }
    }
    match out {
        Some(path) => {
            save_dialogs(path, &dialogs)?;
            run.wrote(path);
            Ok(())
        }
        None => print_json(&dialogs),
    }
}

fn pretrain(g: &Global, run: &mut Run, kb: &Path, dialogs: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(g, run)?;
    if cfg.pretrain.is_none() {
        bail!("config has no [pretrain] section");
    }
    let kb = load_kb(run, kb)?;
    let dialogs = load_dialogs(run, dialogs)?;
    let mut maker = Maker::new(cfg, &kb, &dialogs)?;
    let examples = maker.examples(&kb, &dialogs)?;
    let losses = maker.pretrain(&kb, &examples)?;
    let optimizer = AdamW::new(maker.config.train.optimizer());
    let ck = Checkpoint {
        maker,
        optimizer,
        step: 0,
        metrics: None,
    };
    ck.save(out)?;
    run.wrote(out);
    print_json(&json!({ "epoch_losses": losses, "checkpoint": out }))
}

fn train(g: &Global, run: &mut Run, args: &TrainArgs) -> Result<()> {
    let cfg = load_config(g, run)?;
    let kb = load_kb(run, &args.kb)?;
    let train = load_dialogs(run, &args.train)?;
    let valid = load_dialogs(run, &args.valid)?;
    let maker = match &args.init {
        Some(path) => {
            let ck = load_checkpoint(run, path)?;
            if ck.maker.config.model != cfg.model {
                bail!("checkpoint {} was built with a different [model] section", path.display());
            }
            let mut maker = ck.maker;
            maker.config = cfg;
            run.config(&maker.config);
            maker
        }
        None => {
            let all: Vec<Dialog> = train.iter().chain(&valid).cloned().collect();
            let mut maker = Maker::new(cfg, &kb, &all)?;
            let examples = maker.examples(&kb, &train)?;
            maker.pretrain(&kb, &examples)?;
            maker
        }
    };
    let train_ex = maker.examples(&kb, &train)?;
    let valid_ex = maker.examples(&kb, &valid)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    run.place_in(&args.out);
    let mut trainer = Trainer::new(maker, kb);
    trainer.stage_override = args.stage_override;
    let opts = FitOptions {
        eval: EvalOptions {
            generate: args.generate,
            ..Default::default()
        },
        checkpoint_dir: Some(args.out.clone()),
    };
    let outcome = fit(&mut trainer, &train_ex, &valid_ex, &opts)?;
    run.wrote(&args.out.join("best.json"));

    let last = args.out.join("last.json");
    trainer.checkpoint(None).save(&last)?;
    run.wrote(&last);
    let mut tsv = String::from("step\tstage\tent\tatt\tgen\ttotal\tdistilled\tgrad_norm\n");
    for r in &outcome.history {
        let stage = serde_json::to_value(r.stage)?;
        let _ = writeln!(
            tsv,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}",
            r.step,
            stage.as_str().unwrap_or("-"),
            r.ent,
            r.att,
            r.gen,
            r.total,
            r.distilled,
            r.grad_norm
        );
    }
    let history = args.out.join("history.tsv");
    std::fs::write(&history, tsv).with_context(|| format!("writing {}", history.display()))?;
    run.wrote(&history);
    let evals = args.out.join("evals.json");
    std::fs::write(&evals, serde_json::to_string_pretty(&outcome.evals)?)
        .with_context(|| format!("writing {}", evals.display()))?;
    run.wrote(&evals);

    print_json(&json!({
        "steps": trainer.step,
        "best_step": outcome.best.step,
        "best_metrics": outcome.best.metrics,
        "aborted": outcome.aborted,
    }))?;
    match outcome.aborted {
        Some(msg) => Err(anyhow!(msg)),
        None => Ok(()),
    }
}

fn retrieve(run: &mut Run, checkpoint: &Path, kb_path: &Path, query_file: &Path, k: Option<usize>) -> Result<()> {
    let ck = load_checkpoint(run, checkpoint)?;
    let kb = load_kb(run, kb_path)?;
    let maker = ck.maker;
    let index = cached_index(run, &maker, &kb, checkpoint, kb_path)?;
    let k = k.unwrap_or(maker.config.train.top_k);
    let queries = text_input(run, query_file)?;
    let view = kb.ids();
    let mut out = Vec::new();
    for q in queries.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let ranked = maker.rank(&index, &query_tokens(q), &view, k)?;
        let hits: Vec<Value> = ranked
            .pairs
            .iter()
            .map(|(id, s)| json!({ "id": id.0, "score": s }))
            .collect();
        out.push(json!({ "query": q, "retrieved": hits }));
    }
    print_json(&out)
}

fn generate(
    run: &mut Run,
    checkpoint: &Path,
    kb_path: &Path,
    dialogs: &Path,
    mode: Option<KbMode>,
    beam: Option<usize>,
) -> Result<()> {
    let mut maker = load_checkpoint(run, checkpoint)?.maker;
    if let Some(m) = mode {
        maker.config.kb_mode = m;
    }
    let kb = load_kb(run, kb_path)?;
    let dialogs = load_dialogs(run, dialogs)?;
    let index = cached_index(run, &maker, &kb, checkpoint, kb_path)?;
    let decode = beam.map_or(DecodeMode::Greedy, DecodeMode::Beam);
    let mut out = Vec::new();
    for ex in maker.examples(&kb, &dialogs)? {
        let t = maker.respond(&kb, &index, &ex.context, &ex.view, Some(decode))?;
        out.push(json!({
            "turn_id": turn_id(&dialogs, &ex),
            "response": t.response.join(" "),
            "retrieved_ids": t.retrieved.iter().map(|(id, _)| id.0).collect::<Vec<_>>(),
            "kept_attributes": t.kept_attributes,
        }));
    }
    print_json(&out)
}

fn inspect_attrs(run: &mut Run, checkpoint: &Path, kb_path: &Path, dialogs: &Path) -> Result<()> {
    let maker = load_checkpoint(run, checkpoint)?.maker;
    let kb = load_kb(run, kb_path)?;
    let dialogs = load_dialogs(run, dialogs)?;
    let index = cached_index(run, &maker, &kb, checkpoint, kb_path)?;
    let mut out = Vec::new();
    for ex in maker.examples(&kb, &dialogs)? {
        let t = maker.respond(&kb, &index, &ex.context, &ex.view, None)?;
        let scores: BTreeMap<&str, f64> = maker
            .schema
            .names()
            .iter()
            .map(String::as_str)
            .zip(t.attr_scores.iter().copied())
            .collect();
        out.push(json!({
            "turn_id": turn_id(&dialogs, &ex),
            "retrieved_ids": t.retrieved.iter().map(|(id, _)| id.0).collect::<Vec<_>>(),
            "attr_scores": scores,
            "kept_attributes": t.kept_attributes,
        }));
    }
    print_json(&out)
}

/// One prediction: response text plus optional ranking.
fn parse_prediction(i: usize, v: &Value) -> Result<(Vec<String>, Option<Vec<EntityId>>)> {
    match v {
        Value::String(s) => Ok((tokenize(s), None)),
        Value::Object(o) => {
            let response = o
                .get("response")
                .and_then(Value::as_str)
                .ok_or_else(|| anyhow!("prediction {i} has no \"response\" string"))?;
            let ids = o.get("retrieved_ids").map(|v| parse_ids(i, v)).transpose()?;
            Ok((tokenize(response), ids))
        }
        _ => bail!("prediction {i} is neither a string nor an object"),
    }
}

fn parse_ids(i: usize, v: &Value) -> Result<Vec<EntityId>> {
    let arr = v.as_array().ok_or_else(|| anyhow!("ranking {i} is not an array"))?;
    arr.iter()
        .map(|x| {
            x.as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .map(EntityId)
                .ok_or_else(|| anyhow!("ranking {i} holds a non-id value {x}"))
        })
        .collect()
}

fn evaluate(g: &Global, run: &mut Run, args: &EvalArgs) -> Result<()> {
    let need = |p: &Option<std::path::PathBuf>, flag: &str| p.clone().ok_or_else(|| anyhow!("eval needs {flag}"));
    let (pred, reference, kb_path) = (
        need(&args.pred, "--pred")?,
        need(&args.reference, "--ref")?,
        need(&args.kb, "--kb")?,
    );
    let kb = load_kb(run, &kb_path)?;
    let dialogs = load_dialogs(run, &reference)?;
    let examples = build_examples(&kb, &dialogs, g.kb_mode.unwrap_or(KbMode::CrossDomain), usize::MAX)?;
    let raw: Vec<Value> = serde_json::from_str(&text_input(run, &pred)?).context("predictions must be a JSON array")?;
    if raw.len() != examples.len() {
        bail!("{} predictions for {} reference turns", raw.len(), examples.len());
    }
    let parsed = raw
        .iter()
        .enumerate()
        .map(|(i, v)| parse_prediction(i, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rankings: Option<Vec<Vec<EntityId>>> = parsed.iter().map(|p| p.1.clone()).collect();
    if let Some(path) = &args.retrieved {
        let v: Vec<Value> = serde_json::from_str(&text_input(run, path)?).context("rankings must be a JSON array")?;
        rankings = Some(v.iter().enumerate().map(|(i, x)| parse_ids(i, x)).collect::<Result<_>>()?);
    }
    let predictions: Vec<Vec<String>> = parsed.into_iter().map(|p| p.0).collect();
    let references: Vec<Vec<String>> = examples.iter().map(|e| e.response.clone()).collect();

    let lexicon = ValueLexicon::from_kb(&kb);
    let (gold, source) = gold_value_sets(&examples, &lexicon);
    let b = eval::bleu(&predictions, &references)?;
    let mut report = MetricReport {
        bleu: b.smoothed,
        bleu_raw: b.raw,
        entity_f1: eval::entity_f1(&predictions, &gold, &lexicon)?,
        gold_source: source.into(),
        turns: examples.len(),
        ..Default::default()
    };
    if let Some(rankings) = rankings {
        if rankings.len() != examples.len() {
            bail!("{} rankings for {} reference turns", rankings.len(), examples.len());
        }
        let suggested: Vec<Vec<EntityId>> = examples
            .iter()
            .map(|e| suggested_in_view(&kb, &e.response, &e.view))
            .collect();
        for &k in &args.k_list {
            report.recall_at_k.insert(k, eval::recall_at_k(&rankings, &suggested, k)?);
        }
    }
    print_json(&report)
}

fn repro_options(cfg: &RunConfig, corpus: &CorpusArgs) -> ReproOptions {
    ReproOptions {
        seed: cfg.seed,
        n_entities: corpus.entities,
        n_dialogs: corpus.dialogs,
        generate: !corpus.no_generate,
        ..Default::default()
    }
}

fn emit_table(table: &ReproTable, as_json: bool) -> Result<()> {
    if as_json {
        print_json(table)
    } else {
        print!("{}", table.to_tsv());
        Ok(())
    }
}
