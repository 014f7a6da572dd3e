use advface::attacks::GuardMode;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

/// Environment variable naming the output root.
pub const OUTPUT_ENV: &str = "ADVFACE_OUTPUT";

#[derive(Debug, Parser)]
#[command(name = "advface", version, about = "Train and evaluate generator attacks on a two-stage face detector")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run config; flags given on the command line win over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed every component seed is derived from.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output root for checkpoints, logs and reports.
    #[arg(long, global = true, env = OUTPUT_ENV)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic face dataset to PNG files plus annotations.csv.
    Synth(SynthArgs),
    /// Train the face detector on clean images.
    TrainDetector(TrainDetectorArgs),
    /// Train the perturbation generator against a frozen detector.
    TrainAttack(TrainAttackArgs),
    /// Threshold sweep, JPEG defense curve and figures on held-out images.
    Eval(EvalArgs),
    /// Time the generator, FGSM and C-W attacks per image.
    Bench(BenchArgs),
    /// Write the three-panel figure for one evaluation image.
    ExportFig(ExportFigArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of images.
    #[arg(long, default_value_t = 800)]
    pub n: usize,
    /// Destination folder (default: <output>/synth).
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Training folder (images plus annotations.csv) instead of synthetic data.
    #[arg(long)]
    pub train_dir: Option<PathBuf>,
    /// Evaluation folder instead of synthetic held-out data.
    #[arg(long)]
    pub eval_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDetectorArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Continue from a trainer state written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GuardArg {
    Literal,
    UntilFooled,
}

impl From<GuardArg> for GuardMode {
    fn from(g: GuardArg) -> Self {
        match g {
            GuardArg::Literal => GuardMode::Literal,
            GuardArg::UntilFooled => GuardMode::UntilFooled,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainAttackArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Detector checkpoint (default: <output>/detector.ckpt).
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Squared L2 norm at which the inner loop may stop early.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub epsilon_max: Option<f64>,
    #[arg(long, value_enum)]
    pub guard: Option<GuardArg>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Detector checkpoint (default: <output>/detector.ckpt).
    #[arg(long)]
    pub detector: Option<PathBuf>,
    /// Generator checkpoint (default: <output>/generator.ckpt).
    #[arg(long)]
    pub generator: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    /// Comma-separated confidence thresholds, e.g. 0.5,0.6,0.7.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<f64>>,
    /// JPEG qualities as a list (10,50,90) or a range stepped by 10 (10..100).
    #[arg(long)]
    pub jpeg: Option<String>,
    /// Number of figures to export.
    #[arg(long)]
    pub figures: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    /// Comma-separated attacks to time: generator (gen), fgsm, cw.
    #[arg(long, value_delimiter = ',')]
    pub attacks: Option<Vec<String>>,
    #[arg(long)]
    pub images: Option<usize>,
    /// Fail unless per-image cost follows this order, e.g. gen<fgsm<cw.
    #[arg(long)]
    pub assert_order: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportFigArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    /// Index of the evaluation image.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub magnify: Option<f64>,
    /// Output PNG (default: <output>/figures/figure_<index>.png).
    #[arg(long)]
    pub file: Option<PathBuf>,
}
