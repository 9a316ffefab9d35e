use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use layerstat::attack::LossVariant;
use layerstat::detector::Task;
use layerstat::pvalues::Combiner;

#[derive(Debug, Parser)]
#[command(
    name = "layerstat",
    version,
    about = "Detect adversarial and out-of-distribution inputs from layer representations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub common: CommonArgs,
}

/// Flags shared by every command. Each one overrides the matching
/// config-file key.
#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Layer-representation dataset directory.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,

    /// Detector model directory.
    #[arg(long, global = true)]
    pub model_dir: Option<PathBuf>,

    /// adversarial or ood.
    #[arg(long, global = true, value_parser = parse_task)]
    pub task: Option<Task>,

    /// Comma-separated statistic kinds (multinomial, binomial, trust, lid).
    #[arg(long, global = true)]
    pub stats: Option<String>,

    /// fisher, hmp or aklpe.
    #[arg(long, global = true, value_parser = parse_combiner)]
    pub combiner: Option<Combiner>,

    /// Target false positive rate.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,

    /// Include layer-pair p-values (true or false).
    #[arg(long, global = true)]
    pub pairs: Option<bool>,

    /// Neighbor count.
    #[arg(long, global = true)]
    pub k: Option<usize>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a detector on a calibration dataset.
    Fit,
    /// Score a dataset with a fitted detector.
    Score,
    /// Compute AP and pAUC tables and sweep curves from score files.
    Evaluate(EvaluateArgs),
    /// Run the defense-aware attack against a toy network and detector.
    Attack(AttackArgs),
    /// Run the full synthetic pipeline.
    Demo(DemoArgs),
    /// Check a dataset directory and print its summary.
    Validate,
}

#[derive(Debug, Args, Default)]
pub struct EvaluateArgs {
    /// Score CSV of natural inputs.
    #[arg(long)]
    pub natural: Option<PathBuf>,

    /// Score CSV of anomalous inputs; a `norm` column enables the norm sweep.
    #[arg(long)]
    pub anomalous: Option<PathBuf>,

    /// FPR limits for pAUC; repeat the flag for several.
    #[arg(long = "pauc-alpha")]
    pub pauc_alphas: Vec<f64>,

    /// Anomalous proportion of the headline metrics.
    #[arg(long)]
    pub proportion: Option<f64>,

    /// Random subsets per proportion.
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct AttackArgs {
    /// Toy network directory.
    #[arg(long)]
    pub network: Option<PathBuf>,

    /// Number of inputs to attack.
    #[arg(long)]
    pub limit: Option<usize>,

    /// Per-input time budget in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,

    #[arg(long)]
    pub max_iters: Option<usize>,

    /// targeted, untargeted or alternate.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<LossVariant>,
}

#[derive(Debug, Args, Default)]
pub struct DemoArgs {
    /// Number of test inputs to attack.
    #[arg(long)]
    pub attacks: Option<usize>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: layerstat::Error| e.to_string())
}

fn parse_combiner(s: &str) -> Result<Combiner, String> {
    s.parse().map_err(|e: layerstat::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<LossVariant, String> {
    s.parse().map_err(|e: layerstat::Error| e.to_string())
}
