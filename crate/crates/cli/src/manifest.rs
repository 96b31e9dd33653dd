//! Per-run manifest: enough to re-run a command bit-identically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use maker_core::config::{hex_digest, RunConfig};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub argv: Vec<String>,
    pub version: &'static str,
    pub git_describe: &'static str,
    pub config_fingerprint: Option<String>,
    /// Canonical TOML of the effective config.
    pub config: Option<String>,
    pub seed: Option<u64>,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub status: &'static str,
    pub error: Option<String>,
}

/// Collects what a command read and wrote.
pub struct Run {
    pub cache_dir: PathBuf,
    manifest_path: PathBuf,
    manifest: Manifest,
}

impl Run {
    pub fn new(argv: Vec<String>, cache_dir: PathBuf, manifest_path: Option<PathBuf>) -> Self {
        let manifest_path = manifest_path.unwrap_or_else(|| cache_dir.join("manifest.json"));
        Self {
            cache_dir,
            manifest_path,
            manifest: Manifest {
                argv,
                version: env!("CARGO_PKG_VERSION"),
                git_describe: env!("MAKER_GIT_DESCRIBE"),
                config_fingerprint: None,
                config: None,
                seed: None,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                status: "ok",
                error: None,
            },
        }
    }

    /// Reads an input file, recording its hash.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.manifest
            .inputs
            .insert(path.display().to_string(), hex_digest(&bytes));
        Ok(bytes)
    }

    pub fn input_hash(&self, path: &Path) -> Option<&str> {
        self.manifest.inputs.get(&path.display().to_string()).map(String::as_str)
    }

    pub fn config(&mut self, cfg: &RunConfig) {
        self.manifest.config_fingerprint = Some(cfg.fingerprint());
        self.manifest.config = Some(cfg.to_toml_string());
        self.manifest.seed = Some(cfg.seed);
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn wrote(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    /// Sends the manifest next to the given output directory instead of the cache.
    pub fn place_in(&mut self, dir: &Path) {
        self.manifest_path = dir.join("manifest.json");
    }

    pub fn finish(mut self, outcome: &Result<()>) -> Result<()> {
        if let Err(e) = outcome {
            self.manifest.status = "failed";
            self.manifest.error = Some(format!("{e:#}"));
        }
        if let Some(parent) = self.manifest_path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&self.manifest_path, json)
            .with_context(|| format!("writing {}", self.manifest_path.display()))
    }
}
