//! Fixed-step closed-loop simulation.
//!
//! Each controller tick measures the plant, computes both side controls and
//! records a trace row, then integrates the plant over the controller period
//! in `substeps` RK4 steps with the control held (zero-order hold). Slip
//! advances on the plant clock; the adaptive scalars advance on the controller
//! clock inside the controllers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ControllerKind, ScenarioConfig, TerrainSpec};
use crate::controller::{ControllerError, Observation, SideController};
use crate::dynamics::{advance_slip, integrate_velocities, DynamicsError, PlantParams, PlantState, TerrainModel};
use crate::metrics::{exp_envelope_fit, step_metrics, tail_error, ExpEnvelope, MetricsError, StepMetrics};
use crate::reference::{ReferenceError, ReferenceProfile, ReferenceSample};
use crate::trace::{Fault, SimTrace, TraceMeta, TraceRecord, Warning};

/// Stream selector separating the slip process from any other use of a seed.
const SLIP_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Heading in `(-π, π]`.
    pub theta: f64,
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut a = theta.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    if a == -PI {
        a = PI;
    }
    a
}

/// Differential-drive kinematics over `dt` with the heading taken at the
/// midpoint of the step.
pub fn pose_update(pose: Pose, v_r: f64, v_l: f64, wheelbase: f64, dt: f64) -> Pose {
    let v = 0.5 * (v_r + v_l);
    let omega = (v_r - v_l) / wheelbase;
    let mid = pose.theta + 0.5 * omega * dt;
    Pose {
        x: pose.x + v * mid.cos() * dt,
        y: pose.y + v * mid.sin() * dt,
        theta: wrap_angle(pose.theta + omega * dt),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("controller fault on {side} side: {source}")]
    Controller { side: &'static str, source: ControllerError },
    #[error("plant fault: {0}")]
    Plant(#[from] DynamicsError),
    #[error("reference fault: {0}")]
    Reference(#[from] ReferenceError),
    #[error("non-finite reference at t = {0}")]
    NonFiniteReference(f64),
}

/// A closed loop being stepped one controller tick at a time.
#[derive(Debug, Clone)]
pub struct Simulator {
    params: PlantParams,
    terrain: TerrainModel,
    controllers: [SideController; 2],
    plant: PlantState,
    pose: Pose,
    rng: ChaCha8Rng,
    dt_plant: f64,
    substeps: usize,
    tick: u64,
    held: [f64; 2],
    clamp_warned: [bool; 2],
    warnings: Vec<Warning>,
}

impl Simulator {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, ConfigError> {
        cfg.check()?;
        let terrain = cfg.terrain_model();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SLIP_STREAM);
        let plant = PlantState::new(cfg.initial_velocity, &terrain, &mut rng);
        Ok(Self {
            params: cfg.plant,
            controllers: cfg.side_controllers()?,
            terrain,
            plant,
            pose: Pose::default(),
            rng,
            dt_plant: cfg.dt_plant,
            substeps: cfg.substeps(),
            tick: 0,
            held: [0.0; 2],
            clamp_warned: [false; 2],
            warnings: Vec::new(),
        })
    }

    pub fn period(&self) -> f64 {
        self.dt_plant * self.substeps as f64
    }

    /// Time of the next tick.
    pub fn time(&self) -> f64 {
        self.tick as f64 * self.period()
    }

    pub fn plant(&self) -> &PlantState {
        &self.plant
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn terrain(&self) -> &TerrainModel {
        &self.terrain
    }

    pub fn warnings(&self) -> &[Warning] {
        &self.warnings
    }

    /// Switches the surface. Already-drawn slip targets persist; the next
    /// resample draws from the new ranges.
    pub fn set_terrain(&mut self, terrain: TerrainModel) {
        self.terrain = terrain;
    }

    /// Measures the plant and computes the control for this tick. The control
    /// is held until the next call. Returns the tick's trace row.
    pub fn control(&mut self, reference: &ReferenceSample) -> Result<TraceRecord, SimError> {
        let t = self.time();
        if !reference.is_finite() {
            return Err(SimError::NonFiniteReference(t));
        }
        let v = self.plant.v;
        let mut rec = TraceRecord {
            t,
            reference: reference.v,
            velocity: v,
            slip: self.plant.slip,
            pose: [self.pose.x, self.pose.y, self.pose.theta],
            ..TraceRecord::default()
        };
        let period = self.period();
        for i in 0..2 {
            let error = v[i] - reference.v[i];
            let obs = Observation { error, velocity: v, reference_rate: reference.rate[i] };
            let side = if i == 0 { "right" } else { "left" };
            let out = self.controllers[i]
                .step(&obs, period)
                .map_err(|source| SimError::Controller { side, source })?;
            if out.clamped && !self.clamp_warned[i] {
                self.clamp_warned[i] = true;
                let message = format!("{side} adaptive scalar reached its safety bound; sigma may be mis-tuned");
                log::warn!("t = {t:.3}: {message}");
                self.warnings.push(Warning { t, message });
            }
            rec.error[i] = error;
            rec.control[i] = out.u;
            rec.phi_hat[i] = out.phi_hat;
            rec.phi_norm[i] = out.phi_norm;
        }
        if !rec.control.iter().all(|u| u.is_finite()) {
            return Err(SimError::Controller { side: "either", source: ControllerError::NonFinite("control") });
        }
        self.held = rec.control;
        Ok(rec)
    }

    /// Integrates the plant over one controller period with the held control.
    pub fn advance(&mut self) -> Result<(), SimError> {
        self.advance_observed(|_, _| {})
    }

    /// [`advance`](Self::advance), reporting the start time of every plant
    /// substep and the control applied over it.
    pub fn advance_observed(&mut self, mut observe: impl FnMut(f64, [f64; 2])) -> Result<(), SimError> {
        let base = self.tick * self.substeps as u64;
        for j in 0..self.substeps as u64 {
            let v0 = self.plant.v;
            observe(self.plant.t, self.held);
            let v1 = integrate_velocities(&self.plant, self.held, &self.params, &self.terrain, self.dt_plant)?;
            let mut next = advance_slip(&self.plant, &self.terrain, self.dt_plant, &mut self.rng);
            next.v = v1;
            // Time from the step index, so long runs do not accumulate drift.
            next.t = (base + j + 1) as f64 * self.dt_plant;
            self.plant = next;
            self.pose = pose_update(
                self.pose,
                0.5 * (v0[0] + v1[0]),
                0.5 * (v0[1] + v1[1]),
                self.params.wheelbase,
                self.dt_plant,
            );
        }
        self.tick += 1;
        Ok(())
    }

    /// Control held between ticks, for inspection.
    pub fn held_control(&self) -> [f64; 2] {
        self.held
    }
}

fn meta_for(cfg: &ScenarioConfig) -> TraceMeta {
    let gains = cfg.controller.gains();
    let nn = cfg.controller.kind == ControllerKind::Nnrmfc;
    TraceMeta {
        scenario_id: cfg.id.clone(),
        seed: cfg.seed,
        rbf_seed: cfg.rbf_seed(),
        controller: cfg.controller.kind.name().into(),
        preset: nn.then(|| cfg.controller.preset.name().to_string()),
        terrain: match &cfg.terrain {
            TerrainSpec::Named(n) => TerrainModel::builtin(n).map(|t| t.name).unwrap_or_else(|| n.clone()),
            TerrainSpec::Inline(t) => t.name.clone(),
        },
        profile: cfg.profile.name().into(),
        sample_period: cfg.controller_period(),
        dt_plant: cfg.dt_plant,
        plant_g: cfg.plant.g,
        gains: nn.then_some([gains.kappa, gains.epsilon, gains.sigma, gains.gamma]),
        warnings: Vec::new(),
        fault: None,
    }
}

/// Runs a closed-form scenario, recording ticks `0..=N` where `N` covers the
/// configured duration. A fault stops the run and is reported in the trace
/// metadata together with the index of the last valid record.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimTrace, ConfigError> {
    if cfg.profile == ReferenceProfile::Teleop {
        return Err(ConfigError { line: None, message: "teleop profiles run under the teleop server".into() });
    }
    let mut sim = Simulator::new(cfg)?;
    let ticks = cfg.ticks();
    let mut meta = meta_for(cfg);
    let mut records = Vec::with_capacity(ticks + 1);
    let mut fault = None;
    for k in 0..=ticks {
        let step = cfg
            .profile
            .reference_at(sim.time())
            .map_err(SimError::from)
            .and_then(|r| sim.control(&r))
            .and_then(|rec| {
                records.push(rec);
                if k < ticks {
                    sim.advance()
                } else {
                    Ok(())
                }
            });
        if let Err(e) = step {
            log::error!("scenario {}: {e}", cfg.id);
            fault = Some(Fault { last_valid: records.len().checked_sub(1), reason: e.to_string() });
            break;
        }
    }
    meta.warnings = sim.warnings().to_vec();
    meta.fault = fault;
    Ok(SimTrace { meta, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
    /// Keep every trace in the result (memory grows with runs × duration).
    pub keep_traces: bool,
    /// Window `[t_start, t_end]` for the exponential-envelope fit, if wanted.
    pub envelope_window: Option<(f64, f64)>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { jobs: None, keep_traces: false, envelope_window: None }
    }
}

/// Per-run outcome of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub terrain: String,
    pub seed: u64,
    pub fault: Option<String>,
    /// Step metrics, for step-like profiles.
    pub step: Option<StepMetrics>,
    /// Mean pair-norm error over the final 20% of the run.
    pub tail_error: f64,
    pub envelope: Option<ExpEnvelope>,
    /// Largest |s| seen on either side.
    pub max_abs_slip: f64,
}

/// Per-terrain means over seeds. Faulted runs are excluded from the means;
/// never-settled runs are counted instead of averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub terrain: String,
    pub runs: usize,
    pub faulted: usize,
    pub unsettled: usize,
    pub mean_settling_time: Option<f64>,
    pub mean_overshoot: Option<f64>,
    pub mean_steady_state_error: Option<f64>,
    pub mean_tail_error: f64,
    pub min_alpha: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub runs: Vec<RunSummary>,
    pub aggregate: Vec<AggregateRow>,
    pub traces: Vec<SimTrace>,
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep needs at least one terrain and one seed")]
    Empty,
    #[error("terrain `{0}` is not built in")]
    UnknownTerrain(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

/// Condenses one finished run: step metrics for step-like profiles, tail
/// error, slip extent and, when `envelope_window` is set, the envelope fit.
pub fn summarize_run(trace: &SimTrace, cfg: &ScenarioConfig, envelope_window: Option<(f64, f64)>) -> RunSummary {
    let step_like = matches!(cfg.profile, ReferenceProfile::Step { .. } | ReferenceProfile::RampHold { .. });
    let step = if step_like { step_metrics(trace, 0.02, 0.02).ok() } else { None };
    let envelope = envelope_window
        .and_then(|(a, b)| exp_envelope_fit(trace, a, b).map_err(|e: MetricsError| log::warn!("{e}")).ok());
    let max_abs_slip = trace.records.iter().flat_map(|r| r.slip).fold(0.0f64, |m, s| m.max(s.abs()));
    RunSummary {
        terrain: trace.meta.terrain.clone(),
        seed: cfg.seed,
        fault: trace.meta.fault.as_ref().map(|f| f.reason.clone()),
        step,
        tail_error: tail_error(trace, 0.2),
        envelope,
        max_abs_slip,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs independent scenarios on a pool of `jobs` threads (`None`: all
/// cores) and returns their traces in input order.
pub fn run_batch(configs: &[ScenarioConfig], jobs: Option<usize>) -> Result<Vec<SimTrace>, SweepError> {
    run_batch_with(configs, jobs, |_, trace| trace)
}

fn run_batch_with<T: Send>(
    configs: &[ScenarioConfig],
    jobs: Option<usize>,
    finish: impl Fn(&ScenarioConfig, SimTrace) -> T + Sync,
) -> Result<Vec<T>, SweepError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| SweepError::Pool(e.to_string()))?;
    let outcomes: Vec<Result<T, ConfigError>> = pool.install(|| {
        configs
            .par_iter()
            .map(|cfg| {
                let trace = run_scenario(cfg)?;
                if let Some(f) = &trace.meta.fault {
                    log::warn!("run {} faulted: {}", cfg.id, f.reason);
                }
                Ok(finish(cfg, trace))
            })
            .collect()
    });
    Ok(outcomes.into_iter().collect::<Result<Vec<_>, _>>()?)
}

/// Runs every `(terrain, seed)` pair of `base`, in parallel, and aggregates
/// per terrain in the order given. Results do not depend on `jobs`.
pub fn run_sweep(
    base: &ScenarioConfig,
    terrains: &[String],
    seeds: &[u64],
    opts: &SweepOptions,
) -> Result<SweepResult, SweepError> {
    if terrains.is_empty() || seeds.is_empty() {
        return Err(SweepError::Empty);
    }
    let mut configs = Vec::with_capacity(terrains.len() * seeds.len());
    for name in terrains {
        let model = TerrainModel::builtin(name).ok_or_else(|| SweepError::UnknownTerrain(name.clone()))?;
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.terrain = TerrainSpec::Named(model.name.clone());
            cfg.seed = seed;
            cfg.id = format!("{}-{}-{seed}", base.id, model.name.to_lowercase().replace(' ', "-"));
            configs.push(cfg);
        }
    }
    base.check()?;

    let mut runs = Vec::with_capacity(configs.len());
    let mut traces = Vec::new();
    let summaries = run_batch_with(&configs, opts.jobs, |cfg, trace| {
        let summary = summarize_run(&trace, cfg, opts.envelope_window);
        (summary, opts.keep_traces.then_some(trace))
    })?;
    for (summary, trace) in summaries {
        runs.push(summary);
        traces.extend(trace);
    }

    let aggregate = terrains
        .iter()
        .enumerate()
        .map(|(ti, _)| {
            let rows = &runs[ti * seeds.len()..(ti + 1) * seeds.len()];
            let ok: Vec<&RunSummary> = rows.iter().filter(|r| r.fault.is_none()).collect();
            let settled: Vec<&StepMetrics> =
                ok.iter().filter_map(|r| r.step.as_ref()).filter(|m| m.settled()).collect();
            let unsettled = ok.iter().filter_map(|r| r.step.as_ref()).filter(|m| !m.settled()).count();
            AggregateRow {
                terrain: rows[0].terrain.clone(),
                runs: rows.len(),
                faulted: rows.len() - ok.len(),
                unsettled,
                mean_settling_time: mean(settled.iter().map(|m| m.settling_time)),
                mean_overshoot: mean(ok.iter().filter_map(|r| r.step.as_ref()).map(|m| m.overshoot)),
                mean_steady_state_error: mean(ok.iter().filter_map(|r| r.step.as_ref()).map(|m| m.steady_state_error)),
                mean_tail_error: mean(ok.iter().map(|r| r.tail_error)).unwrap_or(f64::NAN),
                min_alpha: ok.iter().filter_map(|r| r.envelope.as_ref()).map(|e| e.alpha).reduce(f64::min),
            }
        })
        .collect();
    Ok(SweepResult { runs, aggregate, traces })
}
