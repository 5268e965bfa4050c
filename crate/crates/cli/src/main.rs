mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "nasquant", version, about = "Joint search over cell architectures and per-cell quantization policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a JSQW model into a JSQQ file.
    Quantize(QuantizeArgs),
    /// Restore a JSQQ model to a JSQW file.
    Dequantize(DequantizeArgs),
    /// Train one toy network and save it as JSQW.
    Train(TrainArgs),
    /// Joint architecture and policy search.
    Search(SearchArgs),
    /// Policy-only search over a pretrained model.
    SearchPolicy(SearchPolicyArgs),
    /// Validation accuracy and size of a model file.
    Eval(EvalArgs),
    /// Accuracy/size Pareto front over run histories.
    Pareto(ParetoArgs),
    /// Population/sample size sweep.
    Sweep(SweepArgs),
    /// Curve and front tables for one run history.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Uniform bit width for every cell.
    #[arg(long, conflicts_with = "policy", required_unless_present = "policy")]
    pub bits: Option<u8>,
    /// Per-cell bit widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub policy: Option<Vec<u8>>,
    #[arg(long, default_value_t = nasquant::quantizer::DEFAULT_BUCKET_SIZE)]
    pub bucket_size: usize,
    /// Keep the named tensor at full precision (repeatable).
    #[arg(long = "exempt-name")]
    pub exempt_names: Vec<String>,
    /// Keep every tensor of this cell at full precision (repeatable).
    #[arg(long = "exempt-cell")]
    pub exempt_cells: Vec<u16>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DequantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output float width (16, 32 or 64); defaults to 64.
    #[arg(long)]
    pub width: Option<u16>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Search config; its toy evaluator section supplies data and hyperparameters.
    #[arg(long)]
    pub config: PathBuf,
    /// Genome JSON; a random genome is drawn when absent.
    #[arg(long)]
    pub genome: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct SearchPolicyArgs {
    /// Pretrained JSQW model with cell tags and genome metadata.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// JSON array of bit widths placed in the initial population.
    #[arg(long)]
    pub seed_policy: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// JSQQ or JSQW model with genome metadata.
    #[arg(long)]
    pub model: PathBuf,
    /// Search config whose toy evaluator section describes the dataset.
    #[arg(long)]
    pub config: PathBuf,
    /// Also print the fitness under this size target.
    #[arg(long)]
    pub target_bytes: Option<u64>,
}

#[derive(Args)]
pub struct ParetoArgs {
    #[arg(required = true)]
    pub histories: Vec<PathBuf>,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Quantize(a) => commands::quantize(a),
        Command::Dequantize(a) => commands::dequantize(a),
        Command::Train(a) => commands::train(a),
        Command::Search(a) => commands::search(a),
        Command::SearchPolicy(a) => commands::search_policy(a),
        Command::Eval(a) => commands::eval(a),
        Command::Pareto(a) => commands::pareto(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
