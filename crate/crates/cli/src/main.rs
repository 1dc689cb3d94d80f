//! Command-line front end: dataset generation, training, evaluation,
//! ablation grids and analysis output.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "promptmt", version, about = "Multi-task dense prediction with task prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus history.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a freshly initialized model) on a split.
    Eval(EvalArgs),
    /// Train one model per setting and seed along one configuration axis.
    Ablate(AblateArgs),
    /// Attention maps, feature correlation or prompt swapping.
    Analyze(AnalyzeArgs),
    /// Print trainable parameter counts.
    Params(ConfigArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    min_objects: usize,
    #[arg(long, default_value_t = 6)]
    max_objects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generate sequentially instead of on the rayon pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `encoder.prompts=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Print a progress line every this many iterations (0: never).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory or its model.mtt.
    #[arg(long, conflicts_with = "config")]
    model: Option<PathBuf>,
    /// Evaluate an untrained model built from this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Metric CSV destination (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Number of seeds, counting up from --seed (default 0).
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Attn,
    Corr,
    Swap,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Checkpoint directory or its model.mtt.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Task whose prompts are mapped (attn) or substituted (swap); all when absent.
    #[arg(long)]
    task: Option<String>,
    /// Prompted layer for attn; every prompted layer when absent.
    #[arg(long)]
    layer: Option<usize>,
    /// Index of the image used for attn.
    #[arg(long, default_value_t = 0)]
    sample: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Params(a) => commands::params(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
