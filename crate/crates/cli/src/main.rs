//! `mns`: train, sweep, gradient-check and power-model runs for multiplexed
//! SOA neuron networks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mns_core::dataset::DatasetKind;
use mns_core::training::Algorithm;
use mns_core::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "mns", version, about = "Multiplexed SOA neuron network simulator")]
pub struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Root of the run directories [default: runs].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Directory holding the IDX files [default: data].
    #[arg(long, global = true, env = "MNS_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network and write its checkpoint and history.
    Train(TrainCmd),
    /// Run the accuracy grid over crosstalk level, channels and algorithm.
    Sweep(SweepCmd),
    /// Compare backprop gradients with finite differences on random small networks.
    Gradcheck(GradcheckCmd),
    /// Tabulate the power drawn by one hidden layer against channels per SOA.
    Power(PowerCmd),
    /// Summarize the dataset files found under the data directory.
    InspectData(InspectCmd),
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long, value_parser = parse_dataset)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub subset_seed: Option<u64>,
    /// Input power of a full-intensity pixel.
    #[arg(long)]
    pub input_scale: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_parser = parse_algorithm)]
    pub algorithm: Option<Algorithm>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub g_ss_db: Option<f64>,
    #[arg(long)]
    pub p_sat: Option<f64>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    /// Weight-initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shuffle-order seed.
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_delimiter = ',')]
    pub g_ss_list: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub channels_list: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_algorithm)]
    pub algorithms: Option<Vec<Algorithm>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed_base: Option<u64>,
    #[arg(long)]
    pub p_sat: Option<f64>,
    /// Worker threads [default: all cores].
    #[arg(long)]
    pub jobs: Option<usize>,
    /// List the planned cells and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckCmd {
    #[arg(long, value_parser = parse_algorithm)]
    pub algorithm: Option<Algorithm>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub g_ss_db: Option<f64>,
    #[arg(long)]
    pub p_sat: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub layer_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PowerCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',')]
    pub channels_list: Option<Vec<usize>>,
    #[arg(long)]
    pub g_ss_db: Option<f64>,
    #[arg(long)]
    pub p_sat: Option<f64>,
    #[arg(long)]
    pub eta_quantum: Option<f64>,
    #[arg(long)]
    pub insertion_loss: Option<f64>,
    /// Input power of every neuron.
    #[arg(long, conflicts_with = "checkpoint")]
    pub operating_power: Option<f64>,
    /// Take the operating point from this trained network's mean hidden
    /// input over the test subset.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// With --checkpoint, give every neuron the layer-mean input power.
    #[arg(long, requires = "checkpoint")]
    pub uniform: bool,
}

#[derive(Debug, Args)]
pub struct InspectCmd {
    #[command(flatten)]
    pub data: DataArgs,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    match s {
        "mnist" => Ok(DatasetKind::Mnist),
        "fashion-mnist" | "fashion" => Ok(DatasetKind::FashionMnist),
        other => Err(format!("unknown dataset {other:?} (expected mnist or fashion-mnist)")),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Data(_) => EXIT_DATA,
        Error::Cell { source, .. } => exit_code(source),
        Error::Io { .. } | Error::Json(_) | Error::Csv(_) | Error::StaleTrace(_) => 1,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let code = exit_code(&err);
            let category = match code {
                EXIT_CONFIG => "config error",
                EXIT_DATA => "data error",
                _ => "error",
            };
            eprintln!("mns: {category}: {err}");
            ExitCode::from(code)
        }
    }
}
