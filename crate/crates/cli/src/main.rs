mod commands;
mod config;
mod manifest;
mod reproduce;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fslm_core::inference::SamplerKind;

use crate::config::{Baseline, ModelKind};
use crate::reproduce::{Budget, Experiment};

/// Feature selection through likelihood marginalization.
#[derive(Debug, Parser)]
#[command(name = "fslm", version)]
pub struct Cli {
    /// Worker threads for parallel stages; defaults to every core. Results
    /// do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a training set (θ, x, valid) from the prior.
    Simulate(SimulateArgs),
    /// Produce an observation file for a model.
    Observe(ObserveArgs),
    /// Train the surrogate likelihood on a simulated dataset.
    Train(TrainArgs),
    /// Sample the posterior for a feature subset.
    Posterior(PosteriorArgs),
    /// Leave-one-out feature ranking, by marginalization or retraining.
    Rank(RankArgs),
    /// Greedy forward feature selection.
    Greedy(GreedyArgs),
    /// Nearest-neighbour KL estimate between two sample files.
    Kl(KlArgs),
    /// Run a complete experiment into a fresh directory.
    Reproduce(ReproduceArgs),
    /// Re-run a command from its manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; unspecified fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides FSLM_SEED and the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SamplerArgs {
    #[arg(long, value_parser = parse_sampler)]
    pub sampler: Option<SamplerKind>,
    /// Posterior draws to keep.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    s.parse().map_err(|e: fslm_core::FslmError| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Training simulations.
    #[arg(long)]
    pub n: Option<usize>,
    /// Train a validity classifier and simulate from the restricted prior.
    #[arg(long)]
    pub handle_invalid: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct ObserveArgs {
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Comma-separated parameters; defaults to a prior draw (LGM) or the
    /// reference neuron (HH).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub theta: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub components: Option<usize>,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct PosteriorArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub obs: PathBuf,
    /// `all` or a comma-separated list of feature names or indices.
    #[arg(long, default_value = "all")]
    pub features: String,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Fslm,
    Brute,
}

#[derive(Debug, Clone, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long, value_enum, default_value = "fslm")]
    pub mode: Mode,
    /// Training set to retrain on; required by `--mode brute`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for tidy plot data.
    #[arg(long)]
    pub plotdata: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct GreedyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub plotdata: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct KlArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    /// Also write the JSON here, with a manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReproduceArgs {
    #[arg(value_enum)]
    pub experiment: Experiment,
    #[arg(long, value_enum, default_value = "small")]
    pub budget: Budget,
    /// Fresh or empty output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory receiving the re-run outputs.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            return commands::report(anyhow::anyhow!("cannot start {t} threads: {e}"));
        }
    }
    let ctx = commands::Ctx { base: None, argv };
    match commands::run(cli.command, &ctx) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => commands::report(e),
    }
}
