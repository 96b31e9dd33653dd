//! Run configuration: model sizes, schedule, budgets and switches, loaded
//! from TOML presets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribute::{Accumulation, ClipConfig, ClipStrategy};
use crate::entity::PretrainConfig;
use crate::error::{io_err, Error, Result};
use crate::kb::KbMode;
use crate::neural::{AdamWConfig, Backend, TransformerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Initial gain of the selector's output LayerNorm; sets the starting
    /// scale of dot-product scores.
    #[serde(default = "default_gain")]
    pub selector_out_gain: f64,
}

fn default_gain() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn transformer(&self, max_positions: usize) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_positions,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipKind {
    Threshold,
    TopK,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accum: usize,
    pub total_steps: usize,
    /// First step of the distillation stage.
    pub distill_start: usize,
    #[serde(default = "default_refresh")]
    pub refresh_interval: usize,
    pub lr_entity: f64,
    pub lr_attribute: f64,
    pub lr_generator: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub top_k: usize,
    pub attr_threshold: f64,
    #[serde(default = "default_clip")]
    pub attr_clip: ClipKind,
    #[serde(default)]
    pub attr_top_k: usize,
    #[serde(default)]
    pub accumulation: Accumulation,
    /// Validation cadence in optimizer steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_interval: usize,
}

fn default_refresh() -> usize {
    100
}

fn default_clip() -> ClipKind {
    ClipKind::Threshold
}

impl TrainConfig {
    pub fn clip(&self) -> ClipConfig {
        let strategy = match self.attr_clip {
            ClipKind::Threshold => ClipStrategy::Threshold(self.attr_threshold),
            ClipKind::TopK => ClipStrategy::TopKAttrs(self.attr_top_k),
            ClipKind::All => ClipStrategy::All,
        };
        ClipConfig {
            strategy,
            accumulation: self.accumulation,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..Default::default()
        }
    }

    pub fn examples_per_step(&self) -> usize {
        self.batch_size * self.grad_accum
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthConfig {
    pub entity_max_len: usize,
    pub attr_context_len: usize,
    pub attr_kb_len: usize,
    pub gen_context_len: usize,
    pub gen_kb_len: usize,
    pub max_output_len: usize,
}

impl LengthConfig {
    /// Longest context any component consumes.
    pub fn context_budget(&self) -> usize {
        self.entity_max_len.max(self.attr_context_len).max(self.gen_context_len)
    }
}

/// Which parts of the method are switched on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Components {
    pub distillation: bool,
    pub entity_selection: bool,
    pub attribute_selection: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            distillation: true,
            entity_selection: true,
            attribute_selection: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backend: Backend,
    pub kb_mode: KbMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lengths: LengthConfig,
    #[serde(default)]
    pub components: Components,
    /// Contrastive selector pre-training; absent when no global KB exists.
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
}

impl RunConfig {
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(src).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&src).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.transformer(1).validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.grad_accum == 0 {
            return bad("train.batch_size and train.grad_accum must be positive".into());
        }
        if t.distill_start > t.total_steps {
            return bad(format!(
                "train.distill_start {} exceeds train.total_steps {}",
                t.distill_start, t.total_steps
            ));
        }
        if t.refresh_interval == 0 {
            return bad("train.refresh_interval must be positive".into());
        }
        if t.top_k == 0 {
            return bad("train.top_k must be at least 1".into());
        }
        for (k, v) in [
            ("train.lr_entity", t.lr_entity),
            ("train.lr_attribute", t.lr_attribute),
            ("train.lr_generator", t.lr_generator),
            ("train.weight_decay", t.weight_decay),
            ("train.max_grad_norm", t.max_grad_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be a finite non-negative number"));
            }
        }
        if t.attr_clip == ClipKind::TopK && t.attr_top_k == 0 {
            return bad("train.attr_top_k must be positive with attr_clip = \"top_k\"".into());
        }
        t.clip().validate(None)?;
        let l = &self.lengths;
        for (k, v) in [
            ("lengths.entity_max_len", l.entity_max_len),
            ("lengths.attr_context_len", l.attr_context_len),
            ("lengths.attr_kb_len", l.attr_kb_len),
            ("lengths.gen_context_len", l.gen_context_len),
            ("lengths.gen_kb_len", l.gen_kb_len),
            ("lengths.max_output_len", l.max_output_len),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if l.entity_max_len < 2 {
            return bad("lengths.entity_max_len must leave room for the CLS token".into());
        }
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
name = "sample"
kb_mode = "condensed"

[model]
d_model = 16
n_heads = 2
n_layers = 1
d_ff = 32

[train]
batch_size = 2
grad_accum = 32
total_steps = 1500
distill_start = 625
lr_entity = 5e-5
lr_attribute = 5e-5
lr_generator = 1e-4
weight_decay = 0.01
max_grad_norm = 1.0
top_k = 6
attr_threshold = 0.1

[lengths]
entity_max_len = 128
attr_context_len = 200
attr_kb_len = 100
gen_context_len = 200
gen_kb_len = 100
max_output_len = 64
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.train.refresh_interval, 100);
        assert_eq!(cfg.backend, Backend::Toy);
        assert_eq!(cfg.components, Components::default());
        assert_eq!(cfg.train.clip().strategy, ClipStrategy::Threshold(0.1));
        assert_eq!(cfg.train.examples_per_step(), 64);
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn unknown_keys_are_named() {
        let src = SAMPLE.replace("top_k = 6", "top_k = 6\ntopk = 7");
        let err = RunConfig::from_toml_str(&src).unwrap_err().to_string();
        assert!(err.contains("topk"), "{err}");
    }

    #[test]
    fn schedule_invariants_are_checked() {
        let src = SAMPLE.replace("distill_start = 625", "distill_start = 2000");
        assert!(RunConfig::from_toml_str(&src).is_err());
        let src = SAMPLE.replace("attr_threshold = 0.1", "attr_threshold = 1.5");
        assert!(RunConfig::from_toml_str(&src).is_err());
        let src = SAMPLE.replace("n_heads = 2", "n_heads = 3");
        assert!(RunConfig::from_toml_str(&src).is_err());
    }
}
