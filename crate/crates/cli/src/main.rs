//! `gas`: command-line entry point for LUT building, search, derivation,
//! retraining, evaluation, ablations, visualization and random baselines.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
//! Failures print one JSON object to stderr.

mod commands;
mod failure;
mod manifest;
mod output;
mod plot;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "gas", version, about = "Graph-guided latency-aware architecture search on toy segmentation")]
pub struct Cli {
    /// Append the run manifest here instead of `<output dir>/manifest.jsonl`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Latency lookup tables.
    Lut {
        #[command(subcommand)]
        action: LutAction,
    },
    /// Run the architecture search and derive a genotype.
    Search(SearchArgs),
    /// Derive a genotype from a search result.
    Derive(DeriveArgs),
    /// Finetune a genotype from scratch and evaluate it.
    Train(TrainArgs),
    /// Evaluate trained weights on the test split.
    Eval(EvalArgs),
    /// Run an ablation suite.
    Ablate(AblateArgs),
    /// Emit DOT graphs and an operation census of a genotype.
    Viz(VizArgs),
    /// Sample random genotypes (setting a: unconstrained, b: latency budget).
    RandomBaseline(RandomArgs),
}

#[derive(Subcommand, Debug)]
pub enum LutAction {
    /// Build a table for every (op, cell, edge) context of a layout.
    Build(LutArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// Published search hyper-parameters.
    Published,
    /// The calibrated desk-scale preset.
    Toy,
}

/// Configuration sources; later sources win: preset, file, flags.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Search config (TOML); unspecified fields come from the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "published")]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset cache directory (generated on first use).
    #[arg(long)]
    pub data_cache: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LutModeArg {
    Synthetic,
    Profiled,
}

#[derive(Args, Debug)]
pub struct LutArgs {
    #[arg(long, value_enum)]
    pub mode: LutModeArg,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Layout (TOML); defaults to the layout of the resolved config.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub lut: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from `<out>/checkpoint` when present.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DeriveFromArg {
    Updated,
    Raw,
}

#[derive(Args, Debug)]
pub struct DeriveArgs {
    /// `result.json` written by `gas search`.
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long, value_enum, default_value = "updated")]
    pub from: DeriveFromArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub genotype: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub genotype: PathBuf,
    /// `weights.bin` written by `gas train`.
    #[arg(long, required_unless_present = "oracle")]
    pub weights: Option<PathBuf>,
    /// Score the ground truth against itself (harness check).
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SuiteArg {
    Ggm,
    D,
    Graph,
    Beta,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(value_enum)]
    pub suite: SuiteArg,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub lut: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Skip finetuning; rows then carry latency only.
    #[arg(long)]
    pub no_retrain: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub genotype: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SettingArg {
    A,
    B,
}

#[derive(Args, Debug)]
pub struct RandomArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_enum)]
    pub setting: SettingArg,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Latency budget in µs (setting b).
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub lut: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return Failure::usage(e.to_string()).report();
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
