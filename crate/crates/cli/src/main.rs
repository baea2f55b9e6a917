//! `skidsim`: batch runs, terrain sweeps, controller comparisons, the
//! three-round tuning protocol, static plots, and the live teleop server.
//!
//! Exit status: 0 on success, 1 when a run faults or a gate fails, 2 when
//! the configuration or another input is invalid.

mod commands;
mod error;
mod output;
mod plot;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;
use crate::output::Format;

#[derive(Debug, Parser)]
#[command(name = "skidsim", version, about = "Slip-affected skid-steer simulator with RBFNN adaptive control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write trace.csv, meta.json and metrics.json.
    Run(RunArgs),
    /// Run a scenario over terrains × seeds and aggregate per terrain.
    Sweep(SweepArgs),
    /// Run the configured controller and the PID baseline on shared seeds.
    Compare(CompareArgs),
    /// Run the stationary-hold, pivot and tracking rounds on the configured gains.
    TuneProtocol(TuneArgs),
    /// Serve the live teleoperation WebSocket endpoint.
    Serve(ServeArgs),
    /// Render static SVG plots from recorded traces.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Built-in terrains to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_values = ["Dry asphalt", "Wet asphalt", "Gravel", "Mud", "Ice"])]
    terrains: Vec<String>,
    /// Number of consecutive seeds, starting at the scenario seed.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    /// Fit the exponential envelope over this window, e.g. `0,30`.
    #[arg(long, value_parser = parse_window, value_name = "START,END")]
    envelope_window: Option<(f64, f64)>,
    /// Also write every run's trace under `traces/<run id>/`.
    #[arg(long)]
    keep_traces: bool,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Number of consecutive seeds, starting at the scenario seed.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Scenario file supplying plant, terrain, controller and teleop
    /// settings; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Trace CSV files, run directories, or sweep directories with `traces/`.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
}

fn parse_window(text: &str) -> Result<(f64, f64), String> {
    let (a, b) = text.split_once(',').ok_or("expected START,END in seconds")?;
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"));
    Ok((num(a)?, num(b)?))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => commands::run(&a.common.config, &a.common.out, a.common.seed),
        Command::Sweep(a) => {
            let opts = commands::SweepArgs {
                terrains: a.terrains,
                seeds: a.seeds,
                jobs: a.jobs,
                envelope_window: a.envelope_window,
                keep_traces: a.keep_traces,
                format: a.format,
            };
            commands::sweep(&a.common.config, &a.common.out, a.common.seed, &opts)
        }
        Command::Compare(a) => {
            commands::compare(&a.common.config, &a.common.out, a.common.seed, a.seeds, a.jobs, a.format)
        }
        Command::TuneProtocol(a) => commands::tune(&a.common.config, &a.common.out, a.common.seed, a.format),
        Command::Serve(a) => commands::serve(a.config.as_deref(), a.seed, a.addr),
        Command::Plot(a) => plot::plot(&a.traces, &a.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SKIDSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
