//! `pcmp`: encode, decode and inspect `.pcmp` streams, and run the
//! predictor pipeline (synth, train-task, build-table, train-predictor,
//! eval, rd-curve) from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pcmp_core::octree::CandidateLevels;
use pcmp_core::pointcloud::CloudFormat;
use pcmp_core::tasks::TaskKind;
use serde::Serialize;

mod commands;
mod dataset;

/// Exit statuses.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_CORRUPT: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Core(pcmp_core::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    fn exit_code(&self) -> u8 {
        use pcmp_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Core(E::CorruptStream(_)) => EXIT_CORRUPT,
            CliError::Core(E::InvalidConfig(_) | E::DepthOutOfRange { .. } | E::Domain(_)) => EXIT_CONFIG,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Data(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<pcmp_core::Error> for CliError {
    fn from(e: pcmp_core::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "pcmp", version, about = "Depth-scalable octree point cloud codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case", tag = "subcommand")]
pub enum Command {
    /// Encode an .xyz or .ply cloud into a .pcmp stream.
    Encode(EncodeArgs),
    /// Decode a .pcmp stream (or a prefix of it) into a cloud file.
    Decode(DecodeArgs),
    /// Print the header fields of a .pcmp stream.
    Info(InfoArgs),
    /// Generate a labeled synthetic dataset directory.
    Synth(SynthArgs),
    /// Train and freeze a task network.
    TrainTask(TrainTaskArgs),
    /// Build the per-sample rate/loss table for a frozen task network.
    BuildTable(BuildTableArgs),
    /// Train a depth-level predictor against a rate/loss table.
    TrainPredictor(TrainPredictorArgs),
    /// Evaluate selection policies and write one CSV row per policy.
    Eval(EvalArgs),
    /// Train one predictor per lambda and write the rate/metric sweep.
    RdCurve(RdCurveArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EncodeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Octree depth n.
    #[arg(long, default_value_t = 8)]
    pub depth: u32,
    /// Input format; guessed from the extension when absent.
    #[arg(long, value_parser = parse_format)]
    #[serde(serialize_with = "ser_format")]
    pub format: Option<CloudFormat>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DecodeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Decode levels 1..=depth; defaults to the full stream.
    #[arg(long)]
    pub depth: Option<u32>,
    #[arg(long, value_parser = parse_format)]
    #[serde(serialize_with = "ser_format")]
    pub format: Option<CloudFormat>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct InfoArgs {
    pub input: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    #[arg(long, default_value_t = 300)]
    pub per_class: usize,
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    #[arg(long, default_value_t = 0.03)]
    pub max_noise: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainTaskArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// classification or segmentation.
    #[arg(long, default_value = "classification")]
    #[serde(serialize_with = "ser_display")]
    pub task: TaskKind,
    #[arg(long, default_value_t = 12)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct BuildTableArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub task_model: PathBuf,
    /// Output stem; writes `<out>.csv` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Codec depth n.
    #[arg(long, default_value_t = 8)]
    pub depth: u32,
    /// Candidate levels, inclusive: lo..hi.
    #[arg(long, default_value = "2..8")]
    #[serde(serialize_with = "ser_display")]
    pub levels: CandidateLevels,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainPredictorArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Table stem written by build-table.
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 48)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    /// fixed:K, oracle or learned; repeatable.
    #[arg(long = "policy", required = true)]
    pub policies: Vec<String>,
    /// Predictor checkpoint for the learned policy; repeatable.
    #[arg(long = "predictor")]
    pub predictors: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    /// Re-run encode, truncate, decode and the task network instead of
    /// reading the table.
    #[arg(long)]
    pub task_model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct RdCurveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    /// Comma-separated sweep; defaults to the built-in sweep.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 48)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_format(s: &str) -> Result<CloudFormat, String> {
    match s {
        "xyz" => Ok(CloudFormat::Xyz),
        "ply" => Ok(CloudFormat::PlyAscii),
        _ => Err(format!("unknown format {s:?}; expected xyz or ply")),
    }
}

fn ser_format<S: serde::Serializer>(f: &Option<CloudFormat>, s: S) -> Result<S::Ok, S::Error> {
    match f {
        Some(CloudFormat::Xyz) => s.serialize_some("xyz"),
        Some(CloudFormat::PlyAscii) => s.serialize_some("ply"),
        None => s.serialize_none(),
    }
}

fn ser_display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
