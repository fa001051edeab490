use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ncs_core::{Coupling, Mode};

#[derive(Debug, Parser)]
#[command(
    name = "ncs",
    version,
    about = "Local/remote LQ control of networked systems with packet dropouts"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Model document (JSON). Defaults to the bundled three-subsystem instance.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "definite", value_parser = parse_mode)]
    pub mode: Mode,
    /// How the per-subsystem recursion reads the stacked solution.
    #[arg(long, global = true, default_value = "consistent", value_parser = parse_coupling)]
    pub coupling: Coupling,
    /// Overrides the model horizon N.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the coupled Riccati equations; writes cre.json, gains.json, cost.json.
    Solve,
    /// Monte Carlo rollout; writes summary.json and optional trace_<trial>.csv.
    Simulate(SimulateArgs),
    /// Exact expected cost of a gain schedule; writes evaluation.json.
    Evaluate(GainsArg),
    /// Runs the invariant suite; writes check.json.
    Check(CheckArgs),
    /// Dropout-rate sweep; writes sweep.json.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GainsArg {
    /// Gain schedule to use instead of the synthesized optimum.
    #[arg(long)]
    pub gains: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long)]
    pub retain_traces: bool,
    #[command(flatten)]
    pub gains: GainsArg,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Trials for the Monte Carlo comparison.
    #[arg(long, default_value_t = 2000)]
    pub trials: usize,
    #[command(flatten)]
    pub gains: GainsArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Success probability; repeat for several values.
    #[arg(long = "p")]
    pub p: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: ncs_core::Error| e.to_string())
}

fn parse_coupling(s: &str) -> Result<Coupling, String> {
    s.parse().map_err(|e: ncs_core::Error| e.to_string())
}
