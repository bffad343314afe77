use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cers", version, about = "Slide tiling, MIL training, open-set detection and evaluation")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config file and CERS_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment a thumbnail and write its patch grid.
    Tile(TileArgs),
    /// Generate synthetic embedding bags and a manifest.
    Synth(SynthArgs),
    /// Train a gated-attention MIL model on one cross-validation fold.
    TrainMil(TrainMilArgs),
    /// Rank the patches of one bag by attention.
    Topk(TopkArgs),
    /// Fit a reciprocal-point head on MIL slide embeddings.
    TrainArpl(TrainArplArgs),
    /// Flag low-confidence slides as out-of-distribution.
    Detect(DetectArgs),
    /// Train a regularized linear probe on frozen features.
    Probe(ProbeArgs),
    /// Classify embeddings against class prompt embeddings.
    Zeroshot(ZeroshotArgs),
    /// Score generated captions against references.
    Textmetrics(TextmetricsArgs),
    /// Choose the threshold meeting a target sensitivity.
    Calibrate(CalibrateArgs),
    /// Compute metrics with bootstrap intervals.
    Eval(EvalArgs),
    /// Convert a report between JSON and CSV.
    Report(ReportArgs),
    /// Run synth, train-mil, eval and calibrate (plus open-set detection
    /// when OOD bags are configured) into one directory.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// PNG or binary PPM thumbnail.
    #[arg(long)]
    pub thumb: PathBuf,
    #[arg(long)]
    pub thumb_mag: Option<f64>,
    #[arg(long)]
    pub target_mag: Option<f64>,
    #[arg(long)]
    pub patch: Option<u32>,
    #[arg(long)]
    pub min_frac: Option<f64>,
    /// Keep this fraction of the grid.
    #[arg(long, conflicts_with = "sample_count")]
    pub sample_fraction: Option<f64>,
    /// Keep at most this many patches.
    #[arg(long)]
    pub sample_count: Option<usize>,
    /// Treat a uniformly coloured, non-white thumbnail as all tissue.
    #[arg(long)]
    pub uniform_as_tissue: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bags_per_class: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub ood_bags: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainMilArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub test_fold: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Model JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Test-fold predictions CSV.
    #[arg(long)]
    pub preds: Option<PathBuf>,
    /// Validation-fold predictions CSV (for calibration).
    #[arg(long)]
    pub val_preds: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TopkArgs {
    #[arg(long)]
    pub bag: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArplArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Unlabeled out-of-distribution bags to score.
    #[arg(long)]
    pub ood_manifest: Option<PathBuf>,
    /// MIL model whose slide embedding feeds the head.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub joint: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Head JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Confidence CSV for the held-out fold and the OOD bags.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Head JSON from train-arpl; supplies provenance only.
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// `slide_id,confidence[,is_ood]` CSV.
    #[arg(long)]
    pub scores: PathBuf,
    /// Fixed threshold instead of the Otsu split.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Per-slide `slide_id,confidence,flag` CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Summary JSON.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// One feature row per sample: a `.ceb` bag or a headered numeric CSV.
    #[arg(long)]
    pub features: PathBuf,
    /// CSV with a `label` column aligned with the feature rows.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TextmetricsArgs {
    /// One candidate caption per line.
    #[arg(long)]
    pub cand: PathBuf,
    /// One reference caption per line, aligned with `--cand`.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "rouge_l,bleu1,bleu3,bleu5")]
    pub metrics: Vec<String>,
    /// JSON destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub target: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub positive_class: usize,
    /// JSON destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the CSV flattening.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: ReportFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}
