//! Three-round gain acceptance protocol, run in safety order:
//!
//! 1. stationary hold — no motion commanded, the robot must not drift;
//! 2. pivot turn — `V_R = -V_L`, the sides must stay symmetric so the robot
//!    turns in place;
//! 3. profile tracking — the curved-path profile must be tracked closely.
//!
//! A failed stationary hold stops the protocol: gains that cannot hold still
//! are not run on moving profiles.

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ScenarioConfig};
use crate::engine::run_scenario;
use crate::metrics::tail_error;
use crate::reference::ReferenceProfile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneThresholds {
    /// Largest |V_i| allowed while holding still (m/s).
    pub max_drift: f64,
    /// Largest mean |V_R + V_L| during the pivot (m/s).
    pub max_symmetry_error: f64,
    /// Largest mean turning radius during the pivot (m).
    pub max_pivot_radius: f64,
    /// Largest mean ‖e‖ over the final 20% of the tracking run (m/s).
    pub max_tracking_error: f64,
    pub hold_duration: f64,
    pub pivot_duration: f64,
    pub pivot_speed: f64,
}

impl Default for TuneThresholds {
    fn default() -> Self {
        Self {
            max_drift: 0.01,
            max_symmetry_error: 0.02,
            max_pivot_radius: 0.1,
            max_tracking_error: 0.05,
            hold_duration: 20.0,
            pivot_duration: 20.0,
            pivot_speed: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundStatus {
    Pass,
    Fail,
    Skipped,
    Faulted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    pub limit: f64,
}

impl Measurement {
    fn new(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit }
    }

    fn ok(&self) -> bool {
        self.value < self.limit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u8,
    pub name: String,
    pub status: RoundStatus,
    pub measurements: Vec<Measurement>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub scenario: String,
    pub passed: bool,
    pub rounds: Vec<RoundReport>,
}

fn round(
    n: u8,
    name: &str,
    cfg: &ScenarioConfig,
    measure: impl Fn(&crate::trace::SimTrace) -> Vec<Measurement>,
) -> Result<RoundReport, ConfigError> {
    let trace = run_scenario(cfg)?;
    if let Some(f) = &trace.meta.fault {
        return Ok(RoundReport {
            round: n,
            name: name.into(),
            status: RoundStatus::Faulted,
            measurements: Vec::new(),
            note: Some(f.reason.clone()),
        });
    }
    let measurements = measure(&trace);
    let status = if measurements.iter().all(Measurement::ok) { RoundStatus::Pass } else { RoundStatus::Fail };
    Ok(RoundReport { round: n, name: name.into(), status, measurements, note: None })
}

/// Runs the protocol on the gains, plant and terrain of `base`. Invalid
/// configs (e.g. a non-positive gain) are rejected before any round runs.
pub fn tune_protocol(base: &ScenarioConfig, limits: &TuneThresholds) -> Result<TuneReport, ConfigError> {
    base.check()?;
    let with = |profile, duration| ScenarioConfig {
        profile,
        duration,
        initial_velocity: [0.0; 2],
        ..base.clone()
    };

    let hold = round(1, "stationary hold", &with(ReferenceProfile::Stationary, limits.hold_duration), |t| {
        let drift = t.records.iter().flat_map(|r| r.velocity).fold(0.0f64, |m, v| m.max(v.abs()));
        vec![Measurement::new("max drift (m/s)", drift, limits.max_drift)]
    })?;
    let mut rounds = vec![hold];
    if rounds[0].status != RoundStatus::Pass {
        for (n, name) in [(2, "pivot turn"), (3, "profile tracking")] {
            rounds.push(RoundReport {
                round: n,
                name: name.into(),
                status: RoundStatus::Skipped,
                measurements: Vec::new(),
                note: Some("stationary hold failed".into()),
            });
        }
        return Ok(TuneReport { scenario: base.id.clone(), passed: false, rounds });
    }

    let wheelbase = base.plant.wheelbase;
    let pivot = ReferenceProfile::Pivot { speed: limits.pivot_speed };
    rounds.push(round(2, "pivot turn", &with(pivot, limits.pivot_duration), |t| {
        // Judge the second half, after the spin-up transient.
        let half = &t.records[t.records.len() / 2..];
        let n = half.len() as f64;
        let symmetry = half.iter().map(|r| (r.velocity[0] + r.velocity[1]).abs()).sum::<f64>() / n;
        let radius = half
            .iter()
            .map(|r| {
                let v = 0.5 * (r.velocity[0] + r.velocity[1]);
                let omega = (r.velocity[0] - r.velocity[1]) / wheelbase;
                (v / omega).abs()
            })
            .sum::<f64>()
            / n;
        vec![
            Measurement::new("symmetry error mean |V_R + V_L| (m/s)", symmetry, limits.max_symmetry_error),
            Measurement::new("pivot radius deviation (m)", radius, limits.max_pivot_radius),
        ]
    })?);

    rounds.push(round(3, "profile tracking", &with(ReferenceProfile::curved_path(), base.duration), |t| {
        vec![Measurement::new("final-20% mean tracking error (m/s)", tail_error(t, 0.2), limits.max_tracking_error)]
    })?);

    let passed = rounds.iter().all(|r| r.status == RoundStatus::Pass);
    Ok(TuneReport { scenario: base.id.clone(), passed, rounds })
}
