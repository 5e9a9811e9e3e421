mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "omniseg", version, about = "One-shot segmentation in cluttered Omniglot")]
pub struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a cluttered dataset into a shard directory.
    Generate(GenerateArgs),
    /// Train one model stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Training-free template matching baseline.
    TemplateMatch(TemplateMatchArgs),
    /// Aggregate evaluation results into a CSV table and plot data.
    Report(ReportArgs),
    /// Write a synthetic stand-in corpus in the Omniglot directory layout.
    SynthCorpus(SynthCorpusArgs),
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    /// Omniglot root holding images_background/ and images_evaluation/.
    #[arg(long, env = "OMNIGLOT_DIR")]
    pub omniglot_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// train, validation or one-shot.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub level: usize,
    #[arg(long)]
    pub count: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = omniseg::io::DEFAULT_SHARD_RECORDS)]
    pub shard_records: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainModel {
    SiameseUnet,
    MasknetProposal,
    MasknetDecision,
    DiscPreseg,
    DiscClutter,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: TrainModel,
    #[arg(long)]
    pub dataset: PathBuf,
    /// TOML training settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Metrics log (JSON lines); defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Dataset scored after every epoch (first 1000 samples).
    #[arg(long)]
    pub val_dataset: Option<PathBuf>,
    /// Comma-separated encoder widths, six values.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lr_halving_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    pub cosine_match: bool,
    #[arg(long)]
    pub untargeted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalModel {
    SiameseUnet,
    #[value(alias = "masknet-proposal", alias = "masknet-decision")]
    Masknet,
    DiscPreseg,
    DiscClutter,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub model: EvalModel,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Score MaskNet by its best proposal instead of the decided one.
    #[arg(long)]
    pub best_proposal_oracle: bool,
    /// Seed MaskNet proposals without the target embedding.
    #[arg(long)]
    pub untargeted: bool,
    /// Pre-segmented discriminator: wrong picks earn their mask IoU.
    #[arg(long)]
    pub partial_credit: bool,
    /// Evaluate only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Result JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TemplateMatchArgs {
    /// Cluttered dataset to classify.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run N-way one-shot episodes on the evaluation alphabets.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub ways: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Classify only the first N dataset samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Summary JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory of evaluation result JSON files.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub alphabets: usize,
    #[arg(long, default_value_t = 12)]
    pub characters: usize,
    #[arg(long, default_value_t = 2018)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
