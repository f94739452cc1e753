//! Command-line front end: solve, verify, train and compare.

pub mod commands;
pub mod io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for a failed check, invalid input or any other error.
pub const EXIT_FAILURE: i32 = 1;
/// Exit status when a solve hits its iteration cap.
pub const EXIT_NONCONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bisimlab", version, about = "Bisimulation metrics for tabular MDPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Iterate one operator to its fixed point.
    Solve(SolveArgs),
    /// Run the property checks on a seeded random suite or on one MDP.
    Verify(VerifyArgs),
    /// Learn embeddings with the adaptive coefficient.
    Train(TrainArgs),
    /// Solve every operator and tabulate them side by side.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// MDP file in the JSON format.
    #[arg(long)]
    pub mdp: Option<PathBuf>,
    /// Overrides the discount factor from the file.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Sweep cap; derived from tol and gamma when omitted.
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "bisimlab-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OperatorArg {
    Classic,
    Mico,
    Revised,
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistanceArg {
    Mico,
    Simsr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Squared,
    Huber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Feeds the contraction check a negated discount.
    NegateGamma,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "revised")]
    pub operator: OperatorArg,
    /// Next-state weight of the weighted operator.
    #[arg(long, default_value_t = 0.5)]
    pub c: f64,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Check the toy example against its closed forms instead.
    #[arg(long)]
    pub toy: bool,
    /// Number of random MDPs in the suite.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, value_enum, hide = true)]
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "simsr")]
    pub distance: DistanceArg,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub c_lr: f64,
    #[arg(long, value_enum, default_value = "squared")]
    pub loss: LossArg,
    #[arg(long, default_value_t = 250)]
    pub record_interval: usize,
    #[arg(long, default_value_t = 8)]
    pub embed_dim: usize,
    /// Tail threshold of the coefficient monitor.
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    /// Number of trailing coefficient records the monitor inspects.
    #[arg(long, default_value_t = 20)]
    pub window: usize,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    /// Operators to include; all of them when omitted.
    #[arg(long, value_enum)]
    pub operator: Vec<OperatorArg>,
    #[arg(long, default_value_t = 0.5)]
    pub c: f64,
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FAILURE } else { EXIT_OK };
        }
    };
    match commands::run(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
