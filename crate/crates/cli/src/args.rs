use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "gase", version, about = "Attention-sampling neural solver for the capacitated VRP")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a reproducible set of random instances
    Generate(GenerateArgs),
    /// Train a policy with REINFORCE and a greedy-rollout baseline
    Train(TrainArgs),
    /// Greedy-decode an instance set or a CVRPLIB directory and tabulate
    Evaluate(EvaluateArgs),
    /// Solve one instance, list its routes and optionally plot them
    Solve(SolveArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Customers per instance
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Vehicle capacity; defaults to 30/40/50 for n = 20/50/100
    #[arg(long)]
    pub capacity: Option<f64>,
    /// Output instance-set file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Paper,
    Desk,
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Customers per training instance (default 20)
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub capacity: Option<f64>,
    /// Fraction of customers kept as attention neighbours
    #[arg(long)]
    pub k_rate: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Significance level of the baseline-refresh test
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub val_size: Option<usize>,
    /// Gradient L2-norm bound per step; 0 disables clipping
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with any of the flag names as keys (snake_case)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Suppress per-epoch progress on stderr
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[default]
    Greedy,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["instances", "cvrplib"])))]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Checkpoint for CVRPLIB files with more than 50 customers
    #[arg(long)]
    pub large_checkpoint: Option<PathBuf>,
    /// Instance-set file
    #[arg(long)]
    pub instances: Option<PathBuf>,
    /// Directory of CVRPLIB `.vrp` files
    #[arg(long)]
    pub cvrplib: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Greedy)]
    pub mode: ModeArg,
    /// CSV of per-instance reference lengths (a `reference` or `length` column)
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Add a nearest-neighbour heuristic row
    #[arg(long)]
    pub nn: bool,
    #[arg(long, env = "GASE_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, default_value = "eval_out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["vrp", "instances"])))]
pub struct SolveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CVRPLIB `.vrp` file
    #[arg(long)]
    pub vrp: Option<PathBuf>,
    /// Instance-set file, used with --index
    #[arg(long)]
    pub instances: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Write an SVG route plot
    #[arg(long)]
    pub plot: Option<PathBuf>,
}
