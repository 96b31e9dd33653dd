//! Drives the `maker` binary end to end on a small generated corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
name = "tiny"
seed = 0
backend = "toy"
kb_mode = "cross_domain"

[model]
d_model = 16
n_heads = 2
n_layers = 1
d_ff = 32
selector_out_gain = 0.4

[train]
batch_size = 2
grad_accum = 1
total_steps = 6
distill_start = 2
refresh_interval = 2
lr_entity = 5e-5
lr_attribute = 1e-3
lr_generator = 2e-3
weight_decay = 0.01
max_grad_norm = 1.0
top_k = 3
attr_threshold = 0.1
eval_interval = 0

[lengths]
entity_max_len = 24
attr_context_len = 24
attr_kb_len = 16
gen_context_len = 24
gen_kb_len = 16
max_output_len = 12

[components]
distillation = true
entity_selection = true
attribute_selection = true

[pretrain]
batch_size = 8
epochs = 1
lr = 1e-3
weight_decay = 0.01
temperature = 0.05
max_len = 24
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn maker(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_maker"))
            .args(args)
            .current_dir(self.dir.path())
            .env("MAKER_CACHE_DIR", self.path("cache"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.maker(args);
        assert!(
            out.status.success(),
            "maker {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(sb: &Sandbox) {
    let summary = sb.ok(&["--seed", "4", "data", "synth", "--entities", "12", "--dialogs", "6", "--out", "data"]);
    assert_eq!(summary["entities"], 12);
    assert_eq!(summary["dialogs"], 6);
}

#[test]
fn synth_is_seeded_and_writes_a_manifest() {
    let sb = Sandbox::new();
    synth(&sb);
    let kb = std::fs::read(sb.path("data/kb.json")).unwrap();
    let dialogs = std::fs::read(sb.path("data/dialogs.json")).unwrap();
    synth(&sb);
    assert_eq!(std::fs::read(sb.path("data/kb.json")).unwrap(), kb);
    assert_eq!(std::fs::read(sb.path("data/dialogs.json")).unwrap(), dialogs);

    let m = read_json(&sb.path("data/manifest.json"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 4);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);

    let stats = sb.ok(&["kb", "stats", "data/kb.json"]);
    assert_eq!(stats["entities"], 12);
    let view = sb.ok(&["kb", "view", "--kb", "data/kb.json", "--dialogs", "data/dialogs.json", "--mode", "condensed"]);
    assert!(view.is_array() || view.is_object());
}

#[test]
fn eval_of_the_references_is_perfect() {
    let sb = Sandbox::new();
    synth(&sb);
    let dialogs = read_json(&sb.path("data/dialogs.json"));
    let mut preds = Vec::new();
    for d in dialogs.as_array().unwrap() {
        for t in d["turns"].as_array().unwrap() {
            let text = match &t["response"] {
                Value::String(s) => s.clone(),
                Value::Array(toks) => toks.iter().map(|x| x.as_str().unwrap()).collect::<Vec<_>>().join(" "),
                other => panic!("unexpected response {other}"),
            };
            preds.push(Value::String(text));
        }
    }
    std::fs::write(sb.path("pred.json"), serde_json::to_string(&preds).unwrap()).unwrap();
    let report = sb.ok(&["eval", "--pred", "pred.json", "--ref", "data/dialogs.json", "--kb", "data/kb.json"]);
    assert!((report["bleu"].as_f64().unwrap() - 100.0).abs() < 1e-9, "{report}");
    assert!((report["entity_f1"].as_f64().unwrap() - 100.0).abs() < 1e-9, "{report}");

    // Length mismatch is an error, recorded in the manifest.
    std::fs::write(sb.path("short.json"), "[\"hello\"]").unwrap();
    let out = sb.maker(&["eval", "--pred", "short.json", "--ref", "data/dialogs.json", "--kb", "data/kb.json"]);
    assert!(!out.status.success());
    let m = read_json(&sb.path("cache/manifest.json"));
    assert_eq!(m["status"], "failed");
    assert!(m["error"].as_str().unwrap().contains("predictions"));
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let sb = Sandbox::new();
    synth(&sb);
    std::fs::write(sb.path("bad.toml"), TINY.replace("top_k = 3", "top_k = 3\ntopk = 3")).unwrap();
    let out = sb.maker(&["--config", "bad.toml", "pretrain", "--kb", "data/kb.json", "--dialogs", "data/dialogs.json", "--out", "p.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("topk"));

    let out = sb.maker(&["--config", "tiny.toml", "--backend", "pretrained", "pretrain", "--kb", "data/kb.json", "--dialogs", "data/dialogs.json", "--out", "p.json"]);
    assert!(!out.status.success());
}

#[test]
fn pretrain_train_retrieve_generate() {
    let sb = Sandbox::new();
    synth(&sb);
    let kb = "data/kb.json";
    let dialogs = "data/dialogs.json";
    let pre = sb.ok(&["--config", "tiny.toml", "pretrain", "--kb", kb, "--dialogs", dialogs, "--out", "pre.json"]);
    assert_eq!(pre["epoch_losses"].as_array().unwrap().len(), 1);

    let summary = sb.ok(&[
        "--config", "tiny.toml", "train", "--kb", kb, "--train", dialogs, "--valid", dialogs, "--init", "pre.json", "--out", "run",
    ]);
    assert_eq!(summary["steps"], 6);
    for f in ["best.json", "last.json", "history.tsv", "evals.json", "manifest.json"] {
        assert!(sb.path("run").join(f).exists(), "missing {f}");
    }
    let history = std::fs::read_to_string(sb.path("run/history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 7);
    let m = read_json(&sb.path("run/manifest.json"));
    assert_eq!(m["status"], "ok");
    assert!(m["config_fingerprint"].is_string());
    assert_eq!(m["inputs"].as_object().unwrap().len(), 4);

    std::fs::write(sb.path("queries.txt"), "i need a cheap place in the north\n\nany hotel\n").unwrap();
    let hits = sb.ok(&["retrieve", "--checkpoint", "run/best.json", "--kb", kb, "--query-file", "queries.txt", "--k", "4"]);
    let hits = hits.as_array().unwrap();
    assert_eq!(hits.len(), 2);
    let ranked = hits[0]["retrieved"].as_array().unwrap();
    assert_eq!(ranked.len(), 4);
    let scores: Vec<f64> = ranked.iter().map(|h| h["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    // The second call reads the cached index and agrees.
    assert_eq!(
        sb.ok(&["retrieve", "--checkpoint", "run/best.json", "--kb", kb, "--query-file", "queries.txt", "--k", "4"])[0],
        hits[0]
    );

    let gen = sb.ok(&["generate", "--checkpoint", "run/best.json", "--kb", kb, "--dialogs", dialogs]);
    let gen = gen.as_array().unwrap();
    let turns: usize = read_json(&sb.path(dialogs))
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["turns"].as_array().unwrap().len())
        .sum();
    assert_eq!(gen.len(), turns);
    assert_eq!(gen[0]["retrieved_ids"].as_array().unwrap().len(), 3);

    std::fs::write(sb.path("gen.json"), serde_json::to_string(gen).unwrap()).unwrap();
    let report = sb.ok(&["eval", "--pred", "gen.json", "--ref", dialogs, "--kb", kb, "--k-list", "1,3"]);
    assert_eq!(report["recall_at_k"].as_object().unwrap().len(), 2);

    let attrs = sb.ok(&["attrs", "inspect", "--checkpoint", "run/best.json", "--kb", kb, "--dialogs", dialogs]);
    assert!(attrs[0]["attr_scores"]["name"].is_number());
}
