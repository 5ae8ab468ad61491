mod commands;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status 2: bad configuration or arguments.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status 3: failure while running.
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl From<mcitrack::Error> for CliError {
    fn from(e: mcitrack::Error) -> Self {
        match e {
            mcitrack::Error::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mcitrack", version, about = "Video-level tracking with selective state-space context")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on synthetic sequences.
    Train(TrainArgs),
    /// Track one sequence with a trained checkpoint.
    Track(TrackArgs),
    /// One-pass evaluation on a held-out set.
    Eval(EvalArgs),
    /// Train and evaluate every variant along one ablation axis.
    Ablate(AblateArgs),
    /// Draw result boxes onto frames and plot curves.
    Render(RenderArgs),
    /// Write synthetic sequences to disk.
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Overrides the training seed (and `MCIT_SEED`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence directory with frames and `groundtruth.txt`.
    #[arg(long, conflicts_with = "synthetic")]
    pub sequence: Option<PathBuf>,
    /// Seed of a synthetic sequence drawn with the config's data settings.
    #[arg(long)]
    pub synthetic: Option<u64>,
    /// Supplies the tracker and data sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs/track")]
    pub out: PathBuf,
    /// Confidence gate for state commits.
    #[arg(long, allow_negative_numbers = true)]
    pub threshold_a: Option<f64>,
    /// Clip refresh interval in frames; 0 disables refresh.
    #[arg(long)]
    pub update_interval: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of sequence directories; defaults to the synthetic
    /// evaluation set described by the config.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// One of cif_blocks, hidden_size, clip_length, context, cif_structure.
    #[arg(long)]
    pub axis: Option<String>,
    #[arg(long, default_value = "runs/ablate")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Result file with one `x,y,w,h` line per frame.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub sequence: PathBuf,
    /// Score file; defaults to `scores.txt` next to the results.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Skip drawing the ground-truth box.
    #[arg(long)]
    pub no_gt: bool,
    #[arg(long, default_value = "runs/render")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value = "runs/sequences")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Track(a) => commands::track(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Render(a) => commands::render(&a),
        Command::Generate(a) => commands::generate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
