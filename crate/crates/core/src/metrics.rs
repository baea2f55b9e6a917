//! Post-processing of recorded runs: step-response metrics, the exponential
//! envelope fit that certifies convergence, and controller comparisons.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerGains;
use crate::trace::SimTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trace is empty")]
    Empty,
    #[error("reference never leaves zero; step metrics need a nonzero step")]
    NoStep,
    #[error("only {found} samples in the fit window, need at least {needed}")]
    TooShort { found: usize, needed: usize },
    #[error("tracking error is zero at the start of the fit window but not afterwards")]
    ZeroInitialError,
    #[error("cannot compare: {0}")]
    Mismatch(String),
}

/// Step-response metrics for one side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideStepMetrics {
    /// Signed step size (m/s).
    pub step: f64,
    /// Seconds from the step to the last exit from the settling band;
    /// `+∞` when the error is still outside the band at the end.
    #[serde(with = "infinite_as_null")]
    pub settling_time: f64,
    /// Percent of the step by which the response exceeds the reference after
    /// first reaching it.
    pub overshoot: f64,
    /// Mean |e| over the final 20% of the trace (m/s).
    pub steady_state_error: f64,
}

/// Step-response metrics, combined over the sides that received a step:
/// worst settling time, worst overshoot, mean steady-state error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    #[serde(with = "infinite_as_null")]
    pub settling_time: f64,
    pub overshoot: f64,
    pub steady_state_error: f64,
    /// `[right, left]`; `None` for a side whose reference does not move.
    pub sides: [Option<SideStepMetrics>; 2],
}

impl StepMetrics {
    pub fn settled(&self) -> bool {
        self.settling_time.is_finite()
    }
}

/// JSON has no infinity; "never settled" is written as `null`.
mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn side_step(trace: &SimTrace, side: usize, band_abs: f64, band_frac: f64) -> Option<SideStepMetrics> {
    let recs = &trace.records;
    // The step happens at the first change of the reference, or at the start
    // of the trace (from rest) if the reference never changes.
    let onset = (1..recs.len()).find(|&k| recs[k].reference[side] != recs[k - 1].reference[side]);
    let (onset, before) = match onset {
        Some(k) => (k, recs[k - 1].reference[side]),
        None => (0, 0.0),
    };
    let step = recs.last()?.reference[side] - before;
    if step == 0.0 {
        return None;
    }
    let t0 = recs[onset].t;
    let band = band_abs.max(band_frac * step.abs());
    let err = |k: usize| recs[k].error[side].abs();

    let last = recs.len() - 1;
    let settling_time = match (onset..=last).rev().find(|&k| err(k) > band) {
        None => 0.0,
        Some(k) if k == last => f64::INFINITY,
        Some(k) => {
            let (a, b) = (err(k), err(k + 1));
            let frac = if a > b { (a - band) / (a - b) } else { 0.0 };
            recs[k].t + frac * (recs[k + 1].t - recs[k].t) - t0
        }
    };

    let dir = step.signum();
    let overshoot = (onset..=last)
        .find(|&k| recs[k].error[side] * dir >= 0.0)
        .map(|cross| {
            (cross..=last).map(|k| recs[k].error[side] * dir / step.abs()).fold(0.0f64, f64::max) * 100.0
        })
        .unwrap_or(0.0);

    let tail = tail_len(recs.len(), 0.2);
    let steady_state_error = recs[recs.len() - tail..].iter().map(|r| r.error[side].abs()).sum::<f64>() / tail as f64;
    Some(SideStepMetrics { step, settling_time, overshoot, steady_state_error })
}

fn tail_len(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).ceil() as usize).clamp(1, n.max(1))
}

/// Settling time, overshoot and steady-state error of a step response. The
/// settling band is `max(band_abs, band_frac · |step|)`.
pub fn step_metrics(trace: &SimTrace, band_abs: f64, band_frac: f64) -> Result<StepMetrics, MetricsError> {
    if trace.records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let sides = [side_step(trace, 0, band_abs, band_frac), side_step(trace, 1, band_abs, band_frac)];
    let active: Vec<&SideStepMetrics> = sides.iter().flatten().collect();
    if active.is_empty() {
        return Err(MetricsError::NoStep);
    }
    Ok(StepMetrics {
        settling_time: active.iter().map(|m| m.settling_time).fold(0.0, f64::max),
        overshoot: active.iter().map(|m| m.overshoot).fold(0.0, f64::max),
        steady_state_error: active.iter().map(|m| m.steady_state_error).sum::<f64>() / active.len() as f64,
        sides,
    })
}

/// Mean pair-norm tracking error over the final `frac` of the samples.
pub fn tail_error(trace: &SimTrace, frac: f64) -> f64 {
    let n = trace.records.len();
    if n == 0 {
        return f64::NAN;
    }
    let tail = tail_len(n, frac);
    trace.records[n - tail..].iter().map(|r| r.error_norm()).sum::<f64>() / tail as f64
}

/// Convergence rate guaranteed by the stability analysis,
/// `min_i(g_i γ, 2κ)`.
pub fn theoretical_rate(g: [f64; 2], gains: &ControllerGains) -> f64 {
    g.iter().map(|gi| (gi * gains.gamma).min(2.0 * gains.kappa)).fold(f64::INFINITY, f64::min)
}

/// Fitted bound `‖e(t)‖ ≤ m e^{-α (t - t_start)} ‖e(t_start)‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpEnvelope {
    pub m: f64,
    /// Decay rate (1/s); `+∞` when the error is identically zero.
    #[serde(with = "infinite_as_null")]
    pub alpha: f64,
    /// RMS residual of the log-linear fit.
    pub fit_residual: f64,
    /// Points used in the fit.
    pub points: usize,
    /// Whether the fit used envelope peaks (`true`) or every sample.
    pub peak_fit: bool,
    /// Theoretical rate, when the trace records the plant and gains.
    pub rho_bound: Option<f64>,
}

const MIN_FIT_SAMPLES: usize = 50;

/// Envelope fit over raw `(t, ‖e‖)` samples starting at `ts[0]`.
///
/// Local maxima of the norm are fitted by least squares in log space; with
/// fewer than three maxima every positive sample is fitted instead.
pub fn fit_envelope_samples(ts: &[f64], norms: &[f64]) -> Result<ExpEnvelope, MetricsError> {
    let n = ts.len().min(norms.len());
    if n < MIN_FIT_SAMPLES {
        return Err(MetricsError::TooShort { found: n, needed: MIN_FIT_SAMPLES });
    }
    if norms[..n].iter().all(|&x| x == 0.0) {
        return Ok(ExpEnvelope {
            m: 0.0,
            alpha: f64::INFINITY,
            fit_residual: 0.0,
            points: 0,
            peak_fit: false,
            rho_bound: None,
        });
    }
    let e0 = norms[0];
    if e0 == 0.0 {
        return Err(MetricsError::ZeroInitialError);
    }
    let mut peaks: Vec<usize> = Vec::new();
    if norms[0] > norms[1] {
        peaks.push(0);
    }
    for k in 1..n - 1 {
        if norms[k] > norms[k - 1] && norms[k] >= norms[k + 1] && norms[k] > 0.0 {
            peaks.push(k);
        }
    }
    let peak_fit = peaks.len() >= 3;
    let idx: Vec<usize> = if peak_fit { peaks } else { (0..n).filter(|&k| norms[k] > 0.0).collect() };

    let t0 = ts[0];
    let xs: Vec<f64> = idx.iter().map(|&k| ts[k] - t0).collect();
    let ys: Vec<f64> = idx.iter().map(|&k| norms[k].ln()).collect();
    let (slope, intercept) = least_squares(&xs, &ys);
    let fit_residual =
        (xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    Ok(ExpEnvelope {
        m: intercept.exp() / e0,
        alpha: -slope,
        fit_residual,
        points: xs.len(),
        peak_fit,
        rho_bound: None,
    })
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Envelope fit of the pair-norm tracking error over `[t_start, t_end]`.
pub fn exp_envelope_fit(trace: &SimTrace, t_start: f64, t_end: f64) -> Result<ExpEnvelope, MetricsError> {
    let window: Vec<_> = trace.records.iter().filter(|r| r.t >= t_start && r.t <= t_end).collect();
    let ts: Vec<f64> = window.iter().map(|r| r.t).collect();
    let norms: Vec<f64> = window.iter().map(|r| r.error_norm()).collect();
    let mut env = fit_envelope_samples(&ts, &norms)?;
    env.rho_bound = trace.meta.gains.map(|[kappa, epsilon, sigma, gamma]| {
        theoretical_rate(trace.meta.plant_g, &ControllerGains { kappa, epsilon, sigma, gamma })
    });
    Ok(env)
}

/// Mean metrics of one controller over a seed set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: String,
    pub per_seed: Vec<StepMetrics>,
    /// Mean over settled runs; `None` if none settled.
    pub mean_settling_time: Option<f64>,
    pub unsettled: usize,
    pub mean_overshoot: f64,
    pub mean_steady_state_error: f64,
}

/// `a` relative to `b`: positive deltas mean `a` is larger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDelta {
    pub a: String,
    pub b: String,
    pub settling_time: Option<f64>,
    pub overshoot: f64,
    pub steady_state_error: f64,
    /// Seeds where `a` settles strictly faster than `b`.
    pub faster: usize,
    /// Seeds where `a` has strictly smaller steady-state error.
    pub more_accurate: usize,
    /// Seeds where both hold.
    pub wins: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub controllers: Vec<ControllerSummary>,
    pub deltas: Vec<PairwiseDelta>,
}

fn scenario_key(t: &SimTrace) -> (String, String, u64, String, u64) {
    (
        t.meta.terrain.clone(),
        t.meta.profile.clone(),
        t.meta.seed,
        format!("{}/{}/{}", t.meta.sample_period, t.meta.dt_plant, t.records.len()),
        t.meta.plant_g.iter().fold(0u64, |h, g| h.rotate_left(17) ^ g.to_bits()),
    )
}

/// Step metrics per controller and pairwise deltas. Every controller must
/// have run the same scenarios with the same seeds, in the same order.
pub fn compare_controllers(
    runs: &[(String, Vec<SimTrace>)],
    band_abs: f64,
    band_frac: f64,
) -> Result<Comparison, MetricsError> {
    let Some((_, first)) = runs.first() else {
        return Err(MetricsError::Mismatch("no controllers given".into()));
    };
    if first.is_empty() {
        return Err(MetricsError::Mismatch("no runs given".into()));
    }
    for (name, traces) in runs {
        if traces.len() != first.len() {
            return Err(MetricsError::Mismatch(format!(
                "`{name}` has {} runs, `{}` has {}",
                traces.len(),
                runs[0].0,
                first.len()
            )));
        }
        for (k, (a, b)) in traces.iter().zip(first).enumerate() {
            if scenario_key(a) != scenario_key(b) {
                return Err(MetricsError::Mismatch(format!(
                    "run {k} of `{name}` ({} / {} / seed {}) differs from run {k} of `{}` ({} / {} / seed {})",
                    a.meta.terrain, a.meta.profile, a.meta.seed, runs[0].0, b.meta.terrain, b.meta.profile, b.meta.seed
                )));
            }
            if a.is_faulted() {
                return Err(MetricsError::Mismatch(format!("run {k} of `{name}` faulted")));
            }
        }
    }

    let mut controllers = Vec::with_capacity(runs.len());
    for (name, traces) in runs {
        let per_seed = traces.iter().map(|t| step_metrics(t, band_abs, band_frac)).collect::<Result<Vec<_>, _>>()?;
        let settled: Vec<f64> = per_seed.iter().filter(|m| m.settled()).map(|m| m.settling_time).collect();
        let n = per_seed.len() as f64;
        controllers.push(ControllerSummary {
            controller: name.clone(),
            mean_settling_time: (!settled.is_empty()).then(|| settled.iter().sum::<f64>() / settled.len() as f64),
            unsettled: per_seed.len() - settled.len(),
            mean_overshoot: per_seed.iter().map(|m| m.overshoot).sum::<f64>() / n,
            mean_steady_state_error: per_seed.iter().map(|m| m.steady_state_error).sum::<f64>() / n,
            per_seed,
        });
    }

    let mut deltas = Vec::new();
    for i in 0..controllers.len() {
        for j in i + 1..controllers.len() {
            let (a, b) = (&controllers[i], &controllers[j]);
            let pairs = a.per_seed.iter().zip(&b.per_seed);
            let faster = pairs.clone().filter(|(x, y)| x.settling_time < y.settling_time).count();
            let more_accurate = pairs.clone().filter(|(x, y)| x.steady_state_error < y.steady_state_error).count();
            let wins = pairs
                .filter(|(x, y)| x.settling_time < y.settling_time && x.steady_state_error < y.steady_state_error)
                .count();
            deltas.push(PairwiseDelta {
                a: a.controller.clone(),
                b: b.controller.clone(),
                settling_time: a.mean_settling_time.zip(b.mean_settling_time).map(|(x, y)| x - y),
                overshoot: a.mean_overshoot - b.mean_overshoot,
                steady_state_error: a.mean_steady_state_error - b.mean_steady_state_error,
                faster,
                more_accurate,
                wins,
                seeds: a.per_seed.len(),
            });
        }
    }
    Ok(Comparison {
        scenario: first[0].meta.scenario_id.clone(),
        seeds: first.iter().map(|t| t.meta.seed).collect(),
        controllers,
        deltas,
    })
}
