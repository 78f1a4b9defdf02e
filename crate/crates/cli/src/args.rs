use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "agcn",
    version,
    about = "Anisotropic GCN experiments for semi-supervised node classification"
)]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model for several seeds and report test accuracy.
    Train(ExperimentArgs),
    /// Select β by mean validation accuracy over a grid.
    GridSearch(ExperimentArgs),
    /// Compare per-layer AGCN and GCN across network depths.
    DepthStudy(DepthArgs),
    /// Train on a label set expanded by co-training and/or self-training.
    AugmentEval(AugmentArgs),
    /// Build a dataset directory from raw features with a k-NN graph.
    KnnBuild(KnnArgs),
    /// One-way ANOVA over per-run accuracies of several methods.
    Anova(AnovaArgs),
    /// Train one model and write its first-layer activations.
    ExportEmbeddings(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn is_on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Gcn,
    Agcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiffusionArg {
    InputOnce,
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitMode {
    /// Keep the dataset's own split; only initialization varies across runs.
    Fixed,
    /// Draw a fresh stratified split for every run.
    Resample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AugmentArg {
    Co,
    #[value(name = "self")]
    SelfTraining,
    Union,
    Intersection,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// Dataset directory (meta.json, edges.tsv, features.bin, labels.tsv, splits.json).
    #[arg(long, required_unless_present = "replay")]
    pub dataset: Option<PathBuf>,

    /// Re-run the experiment recorded in a report's embedded config; other
    /// experiment flags are ignored.
    #[arg(long, value_name = "REPORT")]
    pub replay: Option<PathBuf>,

    /// Output directory for reports.
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,

    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub train: TrainArgs,

    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "agcn")]
    pub model: ModelArg,

    /// Where diffusion happens [default: input-once for agcn, per-layer for gcn].
    #[arg(long, value_enum)]
    pub diffusion: Option<DiffusionArg>,

    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,

    /// Width of every hidden layer.
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,

    /// Number of weight matrices.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,

    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,

    /// L2 penalty on the first weight matrix.
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,

    /// Divide the smoothness trace by N·F before gating.
    #[arg(long, value_enum, default_value = "off")]
    pub trace_normalize: Toggle,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,

    /// Maximum number of epochs.
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,

    /// Epochs without a new best validation loss before stopping.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,

    #[arg(long, default_value_t = 10)]
    pub runs: usize,

    /// Base seed; run r uses seed + r.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    /// Comma-separated values or start:step:stop.
    #[arg(long, default_value = "0:0.1:5")]
    pub beta_grid: String,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Row-normalize features [default: on, off for image datasets].
    #[arg(long, value_enum)]
    pub row_normalize: Option<Toggle>,

    /// Split handling [default: fixed, resample for image datasets].
    #[arg(long, value_enum)]
    pub splits: Option<SplitMode>,

    /// Training fraction for resampled splits (implies --splits resample).
    #[arg(long)]
    pub train_fraction: Option<f64>,

    /// Validation size for resampled splits [default: 500, 1000 for images].
    #[arg(long)]
    pub val_size: Option<usize>,

    /// Test size for resampled splits [default: 1000, 6000 for images].
    #[arg(long)]
    pub test_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DepthArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,

    /// Depths (number of weight matrices) to compare.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6")]
    pub depths: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,

    #[arg(long, value_enum, required_unless_present = "replay")]
    pub augment: Option<AugmentArg>,

    /// Pseudo-labels added per class [default: ceil(2·|train| / C)].
    #[arg(long)]
    pub additions_per_class: Option<usize>,

    /// Absorption strength of the random walk.
    #[arg(long, default_value_t = agcn::augment::DEFAULT_WALK_LAMBDA)]
    pub walk_lambda: f64,
}

#[derive(Debug, Clone, Args)]
pub struct KnnArgs {
    /// Row-major little-endian f32 feature file.
    #[arg(long)]
    pub features: PathBuf,

    /// Number of rows.
    #[arg(long)]
    pub n: usize,

    /// Number of columns.
    #[arg(long)]
    pub f: usize,

    #[arg(long, default_value_t = 8)]
    pub k: usize,

    /// `node<TAB>class` lines, sorted by node.
    #[arg(long)]
    pub labels: PathBuf,

    /// Dataset name written to meta.json [default: output directory name].
    #[arg(long)]
    pub name: Option<String>,

    /// Fraction of nodes in the stored training split.
    #[arg(long, default_value_t = 0.3)]
    pub train_fraction: f64,

    #[arg(long, default_value_t = 1000)]
    pub val_size: usize,

    #[arg(long, default_value_t = 6000)]
    pub test_size: usize,

    /// Seed for the stored split.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AnovaArgs {
    /// Per-run accuracy files: report CSVs (test_accuracy column) or one
    /// value per line. The file stem names the method.
    #[arg(long, num_args = 2.., required = true)]
    pub inputs: Vec<PathBuf>,

    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
}
