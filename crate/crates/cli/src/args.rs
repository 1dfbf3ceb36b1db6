use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sdl_core::ablate::FIXTURE_MAX_LR;
use sdl_core::{Task, Variant};

#[derive(Debug, Parser)]
#[command(name = "sdl", version, about = "Multi-row embedding heads for zero-shot tag ranking")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "SDL_THREADS", default_value_t = 1)]
    pub threads: usize,

    /// Print JSON on stdout instead of aligned text.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world into a directory.
    Synth(SynthArgs),
    /// Train a head and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// mAP and P/R/F1@K of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Top-K tags per image.
    Rank(RankArgs),
    /// Images ranked for one query tag.
    Retrieve(RetrieveArgs),
    /// Per-image top tags grouped by the row that scored them.
    Report(ReportArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate a grid of loss configurations.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Max,
    L2norm,
    Fast0tag,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Max => Variant::Max,
            VariantArg::L2norm => Variant::L2Norm,
            VariantArg::Fast0tag => Variant::Fast0Tag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Zsl,
    Gzsl,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Zsl => Task::Zsl,
            TaskArg::Gzsl => Task::Gzsl,
        }
    }
}

/// Feature, label, split and word-vector inputs.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// TSV of `image_id<TAB>label,label,...`.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub seen: PathBuf,
    #[arg(long)]
    pub unseen: PathBuf,
    /// FastText `.vec` text file.
    #[arg(long)]
    pub wordvecs: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub word_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub groups: usize,
    #[arg(long, default_value_t = 20)]
    pub labels_per_group: usize,
    #[arg(long, default_value_t = 4)]
    pub unseen_per_group: usize,
    #[arg(long, default_value_t = 5000)]
    pub n_images: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 2)]
    pub min_labels: usize,
    #[arg(long, default_value_t = 6)]
    pub max_labels: usize,
    #[arg(long, default_value_t = 0.6)]
    pub diversity_mix: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

/// Objective flags shared by training and ablation.
#[derive(Debug, Args)]
pub struct LossArgs {
    /// Rows of the embedding matrix; defaults to 7, or 1 for fast0tag.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 0.3)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = VariantArg::Max)]
    pub variant: VariantArg,
    /// Disable semantic diversity weighting.
    #[arg(long)]
    pub no_sdw: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 3e-4)]
    pub wd: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log path; defaults to the checkpoint path plus `.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

/// Checkpoint and scoring flags shared by the evaluation commands.
#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scoring rule the checkpoint was trained with.
    #[arg(long, value_enum, default_value_t = VariantArg::Max)]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value_t = TaskArg::Zsl)]
    pub task: TaskArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Cutoffs for P/R/F1; repeatable.
    #[arg(long = "k", default_values_t = [3, 5])]
    pub k: Vec<usize>,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long = "k", default_value_t = 5)]
    pub k: usize,
    /// Write JSON lines, one per image, here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Query tag.
    #[arg(long)]
    pub tag: String,
    /// Number of images to return.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Tags per image.
    #[arg(long = "k", default_value_t = 5)]
    pub k: usize,
    /// Write JSON lines, one per image, here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Instances per variant.
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Variants to check; repeatable, defaults to all.
    #[arg(long, value_enum)]
    pub variant: Vec<VariantArg>,
    /// Negate analytic gradients so the check must fail.
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateMode {
    /// Baseline, component columns and the full objective.
    Grid,
    /// Number of rows at a fixed lambda.
    MSweep,
    /// Lambda at a fixed number of rows.
    LambdaSweep,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(value_enum)]
    pub mode: AblateMode,
    /// Directory laid out like `sdl synth` output.
    #[arg(long)]
    pub data: PathBuf,
    /// Training seeds, shared by every cell.
    #[arg(long, value_delimiter = ',', default_values_t = [0])]
    pub seeds: Vec<u64>,
    /// Rows for the m-sweep, or the fixed rows of the lambda-sweep (first value).
    #[arg(long, value_delimiter = ',')]
    pub m: Vec<usize>,
    /// Lambdas for the lambda-sweep, or the fixed lambda of the m-sweep (first value).
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Peak learning rate; the default suits synthetic features.
    #[arg(long, default_value_t = FIXTURE_MAX_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = 3e-4)]
    pub wd: f64,
    #[arg(long = "k", default_values_t = [3, 5])]
    pub k: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
