use std::fmt::Display;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use propot_core::{Aggregation, TrainConfig};

use crate::CliError;

fn paper() -> TrainConfig {
    TrainConfig::paper()
}

fn dflt(text: &str, value: impl Display) -> String {
    format!("{text} [default: {value}]")
}

#[derive(Debug, Parser)]
#[command(name = "propot", version, about = "Prototype-enriched text-to-image person retrieval", propagate_version = true)]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate an annotation file and write a normalized corpus cache
    Ingest(IngestArgs),
    /// Generate a synthetic corpus in the annotation format
    Synth(SynthArgs),
    /// Train a model; writes checkpoints and per-epoch logs
    #[command(allow_negative_numbers = true)]
    Train(TrainCmd),
    /// Evaluate a checkpoint and write metrics JSON
    Eval(EvalArgs),
    /// Rank gallery images for a free-text description
    Retrieve(RetrieveArgs),
    /// Export image and caption embeddings
    ExportEmbeddings(ExportArgs),
    /// Train and evaluate once per prototype aggregation scheme
    #[command(allow_negative_numbers = true)]
    AblateAggregation(AblateArgs),
    /// Render ranked retrieval panels to a self-contained HTML file
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Annotation JSON file
    #[arg(long)]
    pub annotations: PathBuf,
    /// Cache directory to create
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of identities
    #[arg(long, default_value_t = 16)]
    pub ids: usize,
    /// Images per identity
    #[arg(long, default_value_t = 4)]
    pub imgs: usize,
    /// Captions per image
    #[arg(long, default_value_t = 2)]
    pub caps: usize,
    /// Identities (taken from the end) placed in the test split
    #[arg(long, default_value_t = 0)]
    pub test_ids: usize,
    /// Rendering noise in [0, 1]
    #[arg(long, default_value_t = 0.3)]
    pub noise: f32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output corpus directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Published hyper-parameters
    Paper,
    /// d=64 preset for synthetic corpora on one CPU
    Desk,
}

/// Flags that assemble a [`TrainConfig`]. Precedence, lowest first:
/// profile, config file, ablation row, explicit flags, `--set`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Corpus directory (containing annotations.json) or annotation file
    #[arg(long)]
    pub data: PathBuf,
    /// Base preset
    #[arg(long, value_enum, default_value_t = Profile::Paper)]
    pub profile: Profile,
    /// TOML file with flat config keys, applied over the profile
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Component ablation row 0-7 (Baseline ... +DPP+IPP+MLM)
    #[arg(long)]
    pub row: Option<usize>,
    /// Override any config key, e.g. --set use_mlm=false (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, help = dflt("Random seed", paper().seed))]
    pub seed: Option<u64>,
    #[arg(long, help = dflt("Training epochs", paper().epochs))]
    pub epochs: Option<usize>,
    #[arg(long, help = dflt("Pairs per batch (B)", paper().batch_size))]
    pub batch_size: Option<usize>,
    #[arg(long, help = dflt("Similarity temperature", paper().tau))]
    pub tau: Option<f64>,
    #[arg(long, help = dflt("Stabilizer inside the SDM logarithm", paper().epsilon))]
    pub epsilon: Option<f64>,
    #[arg(long, help = dflt("Weight of the prototype-to-instance loss", paper().lambda1))]
    pub lambda1: Option<f64>,
    #[arg(long, help = dflt("Weight of the masked language modelling loss", paper().lambda2))]
    pub lambda2: Option<f64>,
    #[arg(long, help = dflt("Prompt context vectors per identity (K)", paper().context_len))]
    pub context_len: Option<usize>,
    #[arg(long, help = dflt("Self-attention encoder blocks (N_a)", paper().sae_blocks))]
    pub sae_blocks: Option<usize>,
    #[arg(long, help = dflt("Cross-attention decoder blocks (N_e)", paper().cad_blocks))]
    pub cad_blocks: Option<usize>,
    #[arg(long, help = dflt("Attention heads of the prototype modules", paper().heads))]
    pub heads: Option<usize>,
    #[arg(long, help = dflt("Embedding width (d)", paper().dim))]
    pub dim: Option<usize>,
    #[arg(long, help = dflt("Base learning rate of the encoders", paper().base_lr_backbone))]
    pub lr_backbone: Option<f64>,
    #[arg(long, help = dflt("Base learning rate of the added modules", paper().base_lr_modules))]
    pub lr_modules: Option<f64>,
    #[arg(long, help = dflt("Adam weight decay", paper().weight_decay))]
    pub weight_decay: Option<f64>,
    #[arg(long, help = dflt("Fraction of steps spent in linear warmup", paper().warmup_fraction))]
    pub warmup: Option<f64>,
    #[arg(long, help = dflt("Caption token masking probability", paper().mask_prob))]
    pub mask_prob: Option<f64>,
    #[arg(long, value_parser = parse_aggregation, help = dflt("Prototype aggregation: sum, average, mlp, parameter or apa", paper().aggregation.display_name().to_ascii_lowercase()))]
    pub aggregation: Option<Aggregation>,
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    Aggregation::parse(s).ok_or_else(|| format!("unknown aggregation `{s}`"))
}

impl ConfigArgs {
    pub fn build(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = match self.profile {
            Profile::Paper => TrainConfig::paper(),
            Profile::Desk => TrainConfig::desk(),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg = cfg.overlay_toml(&text)?;
        }
        if let Some(row) = self.row {
            cfg = cfg.with_ablation_row(row)?;
        }
        macro_rules! apply {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        apply!(
            seed => seed, epochs => epochs, batch_size => batch_size, tau => tau, epsilon => epsilon,
            lambda1 => lambda1, lambda2 => lambda2, context_len => context_len, sae_blocks => sae_blocks,
            cad_blocks => cad_blocks, heads => heads, dim => dim, lr_backbone => base_lr_backbone,
            lr_modules => base_lr_modules, weight_decay => weight_decay, warmup => warmup_fraction,
            mask_prob => mask_prob, aggregation => aggregation,
        );
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from <out>/last.ckpt with the same configuration
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    /// test, else val, else train: the first split with images
    Auto,
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Checkpoint file written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory or annotation file
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Auto)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    /// Metrics JSON file (printed to stdout as well)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-query rankings as JSON
    #[arg(long)]
    pub rankings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    /// Free-text description
    #[arg(long)]
    pub text: String,
    /// Number of gallery images to return
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Checkpoint file written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory or annotation file
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict to one split; all splits by default
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Embedding file to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory receiving one run per scheme and the summary table
    #[arg(long)]
    pub out: PathBuf,
    /// Split scored for the table
    #[arg(long, value_enum, default_value_t = SplitArg::Auto)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Checkpoint to compare, optionally named as NAME=PATH (repeatable)
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<String>,
    /// Corpus directory or annotation file
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Auto)]
    pub split: SplitArg,
    /// Number of query panels (evenly spaced over the split)
    #[arg(long, default_value_t = 8)]
    pub queries: usize,
    /// Gallery thumbnails per ranking
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// HTML file to write
    #[arg(long)]
    pub out: PathBuf,
}
