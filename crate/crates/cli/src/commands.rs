use std::net::SocketAddr;
use std::path::Path;

use serde::Serialize;
use skidsim_core::config::{ControllerKind, ScenarioConfig};
use skidsim_core::engine::{run_batch, run_scenario, run_sweep, summarize_run, RunSummary, SweepError, SweepOptions};
use skidsim_core::metrics::{compare_controllers, exp_envelope_fit, theoretical_rate, ExpEnvelope};
use skidsim_core::reference::ReferenceProfile;
use skidsim_core::trace::SimTrace;
use skidsim_core::tuning::{tune_protocol, RoundStatus, TuneThresholds};
use skidsim_teleop::{ServeError, ServerConfig};

use crate::error::CliError;
use crate::output::{Format, OutputDir};

/// Settling band used by every step-response report: the larger of 0.02 m/s
/// and 2% of the step.
const BAND_ABS: f64 = 0.02;
const BAND_FRAC: f64 = 0.02;

/// Default window for the envelope fit, clipped to the run length.
const ENVELOPE_END: f64 = 30.0;

fn load(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let mut cfg = ScenarioConfig::from_path(path).map_err(|e| CliError::config(path, e))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    log::info!("loaded scenario `{}` from {}", cfg.id, path.display());
    Ok(cfg)
}

/// Contents of `metrics.json` for a single run.
#[derive(Debug, Serialize)]
struct RunMetrics {
    scenario_id: String,
    controller: String,
    profile: String,
    #[serde(flatten)]
    summary: RunSummary,
    envelope_window: Option<[f64; 2]>,
    /// Why no envelope was fitted, when one was attempted.
    envelope_error: Option<String>,
    /// Rate guaranteed by the stability analysis, for the adaptive controller.
    theoretical_rate: Option<f64>,
}

fn run_metrics(trace: &SimTrace, cfg: &ScenarioConfig) -> RunMetrics {
    let mut summary = summarize_run(trace, cfg, None);
    let window = (!matches!(cfg.profile, ReferenceProfile::Stationary)).then(|| [0.0, ENVELOPE_END.min(cfg.duration)]);
    let mut envelope_error = None;
    if let Some([a, b]) = window {
        match exp_envelope_fit(trace, a, b) {
            Ok(env) => summary.envelope = Some(env),
            Err(e) => envelope_error = Some(e.to_string()),
        }
    }
    RunMetrics {
        scenario_id: cfg.id.clone(),
        controller: trace.meta.controller.clone(),
        profile: trace.meta.profile.clone(),
        summary,
        envelope_window: window,
        envelope_error,
        theoretical_rate: (cfg.controller.kind == ControllerKind::Nnrmfc)
            .then(|| theoretical_rate(cfg.plant.g, &cfg.controller.gains())),
    }
}

fn fault_of(trace: &SimTrace) -> Option<String> {
    trace.meta.fault.as_ref().map(|f| format!("run `{}` faulted: {}", trace.meta.scenario_id, f.reason))
}

pub fn run(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load(config, seed)?;
    let trace = run_scenario(&cfg).map_err(|e| CliError::config(config, e))?;
    let metrics = run_metrics(&trace, &cfg);
    let dir = OutputDir::create(out)?;

    dir.write("trace.csv", trace.to_csv_string())?;
    dir.write("meta.json", trace.meta_json())?;
    dir.write_json("metrics.json", &metrics)?;

    println!(
        "{}: {} samples, tail error {:.3e} m/s, max |s| {:.3}",
        cfg.id,
        trace.records.len(),
        metrics.summary.tail_error,
        metrics.summary.max_abs_slip
    );
    if let Some(m) = &metrics.summary.step {
        println!("  settling {:.4} s, overshoot {:.2}%, steady-state error {:.3e} m/s", m.settling_time, m.overshoot, m.steady_state_error);
    }
    for w in &trace.meta.warnings {
        println!("  warning at t = {:.3}: {}", w.t, w.message);
    }
    match fault_of(&trace) {
        Some(msg) => Err(CliError::Fault(msg)),
        None => Ok(()),
    }
}

pub struct SweepArgs {
    pub terrains: Vec<String>,
    pub seeds: u64,
    pub jobs: Option<usize>,
    pub envelope_window: Option<(f64, f64)>,
    pub keep_traces: bool,
    pub format: Format,
}

/// One line of `runs.csv`.
#[derive(Debug, Serialize)]
struct RunRow<'a> {
    terrain: &'a str,
    seed: u64,
    fault: Option<&'a str>,
    settling_time: Option<f64>,
    overshoot: Option<f64>,
    steady_state_error: Option<f64>,
    tail_error: f64,
    envelope_m: Option<f64>,
    envelope_alpha: Option<f64>,
    max_abs_slip: f64,
}

impl<'a> RunRow<'a> {
    fn of(r: &'a RunSummary) -> Self {
        let env: Option<&ExpEnvelope> = r.envelope.as_ref();
        RunRow {
            terrain: &r.terrain,
            seed: r.seed,
            fault: r.fault.as_deref(),
            settling_time: r.step.as_ref().map(|m| m.settling_time),
            overshoot: r.step.as_ref().map(|m| m.overshoot),
            steady_state_error: r.step.as_ref().map(|m| m.steady_state_error),
            tail_error: r.tail_error,
            envelope_m: env.map(|e| e.m),
            envelope_alpha: env.map(|e| e.alpha),
            max_abs_slip: r.max_abs_slip,
        }
    }
}

fn seed_list(first: u64, count: u64) -> Result<Vec<u64>, CliError> {
    if count == 0 {
        return Err(CliError::Input("--seeds must be at least 1".into()));
    }
    Ok((first..first.saturating_add(count)).collect())
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

pub fn sweep(config: &Path, out: &Path, seed: Option<u64>, args: &SweepArgs) -> Result<(), CliError> {
    let cfg = load(config, seed)?;
    if let Some((a, b)) = args.envelope_window {
        if !(a >= 0.0 && b > a) {
            return Err(CliError::Input(format!("--envelope-window {a},{b} must satisfy 0 <= start < end")));
        }
    }
    let seeds = seed_list(cfg.seed, args.seeds)?;
    let opts = SweepOptions { jobs: args.jobs, keep_traces: args.keep_traces, envelope_window: args.envelope_window };
    let result = run_sweep(&cfg, &args.terrains, &seeds, &opts).map_err(|e| match e {
        SweepError::Config(c) => CliError::config(config, c),
        SweepError::UnknownTerrain(_) | SweepError::Empty => CliError::Input(e.to_string()),
        SweepError::Pool(_) => CliError::Fault(e.to_string()),
    })?;

    let rows: Vec<RunRow> = result.runs.iter().map(RunRow::of).collect();
    let dir = OutputDir::create(out)?;
    dir.write_table("runs", &rows, args.format)?;
    dir.write_table("aggregate", &result.aggregate, args.format)?;
    for trace in &result.traces {
        let id = &trace.meta.scenario_id;
        dir.write(&format!("traces/{id}/trace.csv"), trace.to_csv_string())?;
        dir.write(&format!("traces/{id}/meta.json"), trace.meta_json())?;
    }

    println!("{:<12} {:>5} {:>7} {:>9} {:>12} {:>11} {:>11} {:>10}", "terrain", "runs", "faulted", "unsettled", "settling (s)", "overshoot %", "tail error", "min alpha");
    for a in &result.aggregate {
        println!(
            "{:<12} {:>5} {:>7} {:>9} {:>12} {:>11} {:>11.3e} {:>10}",
            a.terrain,
            a.runs,
            a.faulted,
            a.unsettled,
            fmt_opt(a.mean_settling_time, 5),
            fmt_opt(a.mean_overshoot, 2),
            a.mean_tail_error,
            fmt_opt(a.min_alpha, 4)
        );
    }
    let faulted: usize = result.aggregate.iter().map(|a| a.faulted).sum();
    if faulted > 0 {
        return Err(CliError::Fault(format!("{faulted} of {} runs faulted; see runs.{}", result.runs.len(), args.format.extension())));
    }
    Ok(())
}

/// One line of `comparison.csv`.
#[derive(Debug, Serialize)]
struct CompareRow<'a> {
    controller: &'a str,
    seed: u64,
    settling_time: f64,
    overshoot: f64,
    steady_state_error: f64,
}

pub fn compare(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    seeds: u64,
    jobs: Option<usize>,
    format: Format,
) -> Result<(), CliError> {
    let cfg = load(config, seed)?;
    let seeds = seed_list(cfg.seed, seeds)?;
    let kinds = [ControllerKind::Nnrmfc, ControllerKind::Pid];
    let configs: Vec<ScenarioConfig> = kinds
        .iter()
        .flat_map(|&kind| {
            let cfg = &cfg;
            seeds.iter().map(move |&s| {
                let mut c = cfg.clone();
                c.seed = s;
                c.controller.kind = kind;
                c.id = format!("{}-{}-{s}", cfg.id, kind.name());
                c
            })
        })
        .collect();
    let mut traces = run_batch(&configs, jobs).map_err(|e| match e {
        SweepError::Config(c) => CliError::config(config, c),
        other => CliError::Fault(other.to_string()),
    })?;
    if let Some(msg) = traces.iter().find_map(fault_of) {
        return Err(CliError::Fault(msg));
    }
    let pid = traces.split_off(seeds.len());
    let runs = vec![(kinds[0].name().to_string(), traces), (kinds[1].name().to_string(), pid)];
    let report = compare_controllers(&runs, BAND_ABS, BAND_FRAC).map_err(|e| CliError::Input(e.to_string()))?;
    let dir = OutputDir::create(out)?;

    match format {
        Format::Json => dir.write_json("comparison.json", &report)?,
        Format::Csv => {
            let rows: Vec<CompareRow> = report
                .controllers
                .iter()
                .flat_map(|c| {
                    c.per_seed.iter().zip(&report.seeds).map(|(m, &seed)| CompareRow {
                        controller: &c.controller,
                        seed,
                        settling_time: m.settling_time,
                        overshoot: m.overshoot,
                        steady_state_error: m.steady_state_error,
                    })
                })
                .collect();
            dir.write_table("comparison", &rows, Format::Csv)?
        }
    };

    for c in &report.controllers {
        println!(
            "{:<7} mean settling {} s ({} unsettled), overshoot {:.2}%, steady-state error {:.3e} m/s",
            c.controller,
            fmt_opt(c.mean_settling_time, 4),
            c.unsettled,
            c.mean_overshoot,
            c.mean_steady_state_error
        );
    }
    for d in &report.deltas {
        println!(
            "{} vs {}: faster on {}/{n}, more accurate on {}/{n}, both on {}/{n} seeds",
            d.a,
            d.b,
            d.faster,
            d.more_accurate,
            d.wins,
            n = d.seeds
        );
    }
    Ok(())
}

/// One line of `tune_report.csv`: a measurement, or a round without any.
#[derive(Debug, Serialize)]
struct TuneRow<'a> {
    round: u8,
    name: &'a str,
    status: RoundStatus,
    measurement: Option<&'a str>,
    value: Option<f64>,
    limit: Option<f64>,
    note: Option<&'a str>,
}

pub fn tune(config: &Path, out: &Path, seed: Option<u64>, format: Format) -> Result<(), CliError> {
    let cfg = load(config, seed)?;
    let report = tune_protocol(&cfg, &TuneThresholds::default()).map_err(|e| CliError::config(config, e))?;
    let dir = OutputDir::create(out)?;
    match format {
        Format::Json => dir.write_json("tune_report.json", &report)?,
        Format::Csv => {
            let mut rows = Vec::new();
            for r in &report.rounds {
                let base = |m: Option<&'_ skidsim_core::tuning::Measurement>| TuneRow {
                    round: r.round,
                    name: &r.name,
                    status: r.status,
                    measurement: None,
                    value: m.map(|m| m.value),
                    limit: m.map(|m| m.limit),
                    note: r.note.as_deref(),
                };
                if r.measurements.is_empty() {
                    rows.push(base(None));
                }
                for m in &r.measurements {
                    rows.push(TuneRow { measurement: Some(&m.name), ..base(Some(m)) });
                }
            }
            dir.write_table("tune_report", &rows, Format::Csv)?
        }
    };
    for r in &report.rounds {
        let status = match r.status {
            RoundStatus::Pass => "PASS",
            RoundStatus::Fail => "FAIL",
            RoundStatus::Skipped => "SKIP",
            RoundStatus::Faulted => "FAULT",
        };
        println!("round {} ({}): {status}", r.round, r.name);
        for m in &r.measurements {
            println!("  {} = {:.4e} (limit {})", m.name, m.value, m.limit);
        }
        if let Some(note) = &r.note {
            println!("  {note}");
        }
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Fault("tuning protocol did not pass".into()))
    }
}

pub fn serve(config: Option<&Path>, seed: Option<u64>, addr: SocketAddr) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(path) => load(path, None)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Fault(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let handle = skidsim_teleop::spawn(ServerConfig::new(cfg), addr).await.map_err(|e| match (e, config) {
            (ServeError::Config(c), Some(path)) => CliError::config(path, c),
            (e, _) => CliError::Fault(e.to_string()),
        })?;
        println!("teleop server on ws://{}/ws (health: http://{}/healthz); Ctrl-C to stop", handle.addr, handle.addr);
        if let Err(e) = tokio::signal::ctrl_c().await {
            log::error!("cannot listen for Ctrl-C: {e}");
        }
        handle.shutdown().await;
        Ok(())
    })
}
