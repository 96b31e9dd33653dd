//! `maker`: corpus tools, training, retrieval, generation and evaluation.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maker_core::kb::KbMode;
use maker_core::neural::Backend;
use maker_core::trainer::Stage;

use manifest::Run;

/// Built-in preset used when `--config` is absent.
pub const DEFAULT_PRESET: &str = include_str!("../../../presets/synthetic_desk.toml");

#[derive(Parser, Debug)]
#[command(name = "maker", version, about = "Multi-grained knowledge retrieval for KB-grounded dialog")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// TOML run config; defaults to the built-in synthetic desk preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// toy | pretrained
    #[arg(long, global = true)]
    pub backend: Option<Backend>,
    /// condensed | in_domain | cross_domain
    #[arg(long, global = true)]
    pub kb_mode: Option<KbMode>,
    /// Where to write the run manifest (default: next to outputs, else the cache dir).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Inspect knowledge-base files.
    #[command(subcommand)]
    Kb(KbCmd),
    /// Generate or annotate dialog corpora.
    #[command(subcommand)]
    Data(DataCmd),
    /// Contrastive pre-training of the entity selector; writes a checkpoint.
    Pretrain {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        dialogs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage training; writes best.json, last.json and history.tsv.
    Train(TrainArgs),
    /// Top-k entities for each line of a query file.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        query_file: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Responses for every turn of a dialog file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        dialogs: PathBuf,
        /// KB view; defaults to the checkpoint's mode.
        #[arg(long)]
        mode: Option<KbMode>,
        /// Beam width; greedy when absent.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Attribute-selector diagnostics.
    #[command(subcommand)]
    Attrs(AttrsCmd),
    /// Score predictions against references, or run the KB-mode sweep.
    Eval(EvalCli),
    /// Reproduce the component ablation on a generated corpus.
    #[command(subcommand)]
    Repro(ReproCmd),
}

#[derive(Subcommand, Debug)]
pub enum KbCmd {
    /// Entity, attribute and domain counts.
    Stats { path: PathBuf },
    /// The KB a dialog sees under a given mode.
    View {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        dialogs: PathBuf,
        #[arg(long)]
        mode: Option<KbMode>,
        /// Index of the dialog in the file.
        #[arg(long, default_value_t = 0)]
        dialog: usize,
    },
}

#[derive(Subcommand, Debug)]
pub enum DataCmd {
    /// Seeded synthetic KB and dialogs (uses --seed).
    Synth {
        #[arg(long, default_value_t = 200)]
        entities: usize,
        #[arg(long, default_value_t = 500)]
        dialogs: usize,
        /// Output directory for kb.json and dialogs.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mark KB-related response tokens.
    Annotate {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        dialogs: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    /// Start from this checkpoint (e.g. from `maker pretrain`); otherwise
    /// initialize and pre-train per the config.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// warmup | distill: run the whole schedule in one stage.
    #[arg(long)]
    pub stage_override: Option<Stage>,
    /// Decode responses at validation time (slower; selects by Entity F1).
    #[arg(long)]
    pub generate: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum AttrsCmd {
    /// Accumulated attribute importance per turn.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        dialogs: PathBuf,
    },
}

#[derive(Args, Debug)]
#[command(args_conflicts_with_subcommands = true)]
pub struct EvalCli {
    #[command(subcommand)]
    pub sweep: Option<EvalCmd>,
    #[command(flatten)]
    pub files: EvalArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predictions: JSON array of strings or of `maker generate` records.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Reference dialog file.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7")]
    pub k_list: Vec<usize>,
    /// Rankings as a JSON array of id arrays, overriding ids in --pred.
    #[arg(long)]
    pub retrieved: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum EvalCmd {
    /// Train and test the full system once per KB mode on a generated corpus.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "condensed,in_domain,cross_domain")]
        modes: Vec<KbMode>,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
}

#[derive(Subcommand, Debug)]
pub enum ReproCmd {
    /// Full system, w/o distillation, w/o attribute selection and lexical baselines.
    Ablation {
        #[command(flatten)]
        corpus: CorpusArgs,
    },
}

#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    #[arg(long, default_value_t = 200)]
    pub entities: usize,
    #[arg(long, default_value_t = 500)]
    pub dialogs: usize,
    /// Skip decoding; report recall only.
    #[arg(long)]
    pub no_generate: bool,
    /// Emit JSON instead of TSV.
    #[arg(long)]
    pub json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cache_dir = std::env::var_os("MAKER_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".maker-cache"));
    let mut run = Run::new(std::env::args().collect(), cache_dir, cli.global.manifest.clone());
    let outcome = commands::dispatch(&cli, &mut run);
    let written = run.finish(&outcome);
    match (outcome, written) {
        (Ok(()), Ok(())) => ExitCode::SUCCESS,
        (Err(e), _) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
        (Ok(()), Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
