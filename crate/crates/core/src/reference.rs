//! Commanded side-velocity generators.
//!
//! Closed-form profiles return exact derivatives. The teleoperation stream is
//! stateful: it holds the last joystick command, differentiates it numerically,
//! and falls back to a stop when the operator goes quiet.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferenceSample {
    pub t: f64,
    /// Commanded velocities `[V_Rd, V_Ld]` (m/s).
    pub v: [f64; 2],
    /// Their time derivatives (m/s²).
    pub rate: [f64; 2],
}

impl ReferenceSample {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.v.iter().chain(&self.rate).all(|x| x.is_finite())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReferenceError {
    #[error("teleop references are produced by a live command stream, not a closed form")]
    NotClosedForm,
    #[error("profile parameter `{0}` is invalid")]
    BadParameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferenceProfile {
    /// Both sides commanded to rest.
    Stationary,
    /// Jump from rest to `(v_r, v_l)` at `t_step`.
    Step {
        #[serde(default = "default_step")]
        v_r: f64,
        #[serde(default = "default_step")]
        v_l: f64,
        #[serde(default)]
        t_step: f64,
    },
    /// Linear ramp from rest over `[t_start, t_end]`, then hold.
    RampHold { v_r: f64, v_l: f64, t_start: f64, t_end: f64 },
    /// Smooth cubic ramp to distinct side speeds over `[0, ramp_time]`, then
    /// hold. The speed difference makes the robot follow a curve.
    CurvedPath {
        #[serde(default = "default_curve_r")]
        v_r: f64,
        #[serde(default = "default_curve_l")]
        v_l: f64,
        #[serde(default = "default_ramp_time")]
        ramp_time: f64,
    },
    /// Turn in place: `V_Rd = speed`, `V_Ld = -speed`.
    Pivot {
        #[serde(default = "default_pivot")]
        speed: f64,
    },
    /// Live joystick stream.
    Teleop,
}

fn default_step() -> f64 {
    0.5
}
fn default_curve_r() -> f64 {
    1.0
}
fn default_curve_l() -> f64 {
    0.7
}
fn default_ramp_time() -> f64 {
    10.0
}
fn default_pivot() -> f64 {
    0.3
}

impl ReferenceProfile {
    pub fn step() -> Self {
        ReferenceProfile::Step { v_r: default_step(), v_l: default_step(), t_step: 0.0 }
    }

    pub fn curved_path() -> Self {
        ReferenceProfile::CurvedPath { v_r: default_curve_r(), v_l: default_curve_l(), ramp_time: default_ramp_time() }
    }

    pub fn pivot() -> Self {
        ReferenceProfile::Pivot { speed: default_pivot() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReferenceProfile::Stationary => "stationary",
            ReferenceProfile::Step { .. } => "step",
            ReferenceProfile::RampHold { .. } => "ramp-hold",
            ReferenceProfile::CurvedPath { .. } => "curved-path",
            ReferenceProfile::Pivot { .. } => "pivot",
            ReferenceProfile::Teleop => "teleop",
        }
    }

    pub fn validate(&self) -> Result<(), ReferenceError> {
        let finite = |x: f64, name| if x.is_finite() { Ok(()) } else { Err(ReferenceError::BadParameter(name)) };
        match *self {
            ReferenceProfile::Stationary | ReferenceProfile::Teleop => Ok(()),
            ReferenceProfile::Step { v_r, v_l, t_step } => {
                finite(v_r, "v_r")?;
                finite(v_l, "v_l")?;
                if !(t_step >= 0.0) {
                    return Err(ReferenceError::BadParameter("t_step"));
                }
                Ok(())
            }
            ReferenceProfile::RampHold { v_r, v_l, t_start, t_end } => {
                finite(v_r, "v_r")?;
                finite(v_l, "v_l")?;
                if !(t_start >= 0.0 && t_end > t_start) {
                    return Err(ReferenceError::BadParameter("t_end"));
                }
                Ok(())
            }
            ReferenceProfile::CurvedPath { v_r, v_l, ramp_time } => {
                finite(v_r, "v_r")?;
                finite(v_l, "v_l")?;
                if !(ramp_time > 0.0) {
                    return Err(ReferenceError::BadParameter("ramp_time"));
                }
                Ok(())
            }
            ReferenceProfile::Pivot { speed } => finite(speed, "speed"),
        }
    }

    /// Times where the profile is not differentiable.
    pub fn breakpoints(&self) -> Vec<f64> {
        match *self {
            ReferenceProfile::Step { t_step, .. } => vec![t_step],
            ReferenceProfile::RampHold { t_start, t_end, .. } => vec![t_start, t_end],
            _ => Vec::new(),
        }
    }

    /// Commanded velocities and their exact derivatives at `t`.
    /// Derivatives at a breakpoint are those of the segment starting there.
    pub fn reference_at(&self, t: f64) -> Result<ReferenceSample, ReferenceError> {
        let (v, rate) = match *self {
            ReferenceProfile::Stationary => ([0.0; 2], [0.0; 2]),
            ReferenceProfile::Step { v_r, v_l, t_step } => {
                if t >= t_step {
                    ([v_r, v_l], [0.0; 2])
                } else {
                    ([0.0; 2], [0.0; 2])
                }
            }
            ReferenceProfile::RampHold { v_r, v_l, t_start, t_end } => {
                if t < t_start {
                    ([0.0; 2], [0.0; 2])
                } else if t < t_end {
                    let span = t_end - t_start;
                    let f = (t - t_start) / span;
                    ([v_r * f, v_l * f], [v_r / span, v_l / span])
                } else {
                    ([v_r, v_l], [0.0; 2])
                }
            }
            ReferenceProfile::CurvedPath { v_r, v_l, ramp_time } => {
                if t < ramp_time {
                    let x = t / ramp_time;
                    let ease = x * x * (3.0 - 2.0 * x);
                    let slope = 6.0 * x * (1.0 - x) / ramp_time;
                    ([v_r * ease, v_l * ease], [v_r * slope, v_l * slope])
                } else {
                    ([v_r, v_l], [0.0; 2])
                }
            }
            ReferenceProfile::Pivot { speed } => ([speed, -speed], [0.0; 2]),
            ReferenceProfile::Teleop => return Err(ReferenceError::NotClosedForm),
        };
        Ok(ReferenceSample { t, v, rate })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopConfig {
    /// Silence after which the watchdog starts ramping the command down (s).
    pub watchdog_timeout: f64,
    /// Duration of the watchdog ramp to rest (s).
    pub watchdog_ramp: f64,
    /// Samples in the moving average applied to the backward difference.
    pub smoother_window: usize,
    /// Largest accepted command magnitude per side (m/s).
    pub max_speed: f64,
    /// Slew limit on the commanded velocity (m/s²). `None` passes joystick
    /// steps straight through.
    pub max_accel: Option<f64>,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        Self { watchdog_timeout: 0.5, watchdog_ramp: 1.0, smoother_window: 5, max_speed: 1.5, max_accel: Some(2.0) }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeleopError {
    #[error("command stamped {stamp} arrived after {last}; dropped")]
    OutOfOrder { stamp: f64, last: f64 },
    #[error("command {value} m/s exceeds the {max} m/s limit")]
    TooFast { value: f64, max: f64 },
    #[error("command is not finite")]
    NonFinite,
}

/// Reference stream driven by timestamped joystick commands.
///
/// Commands are zero-order held. After `watchdog_timeout` seconds without a
/// command the held value ramps linearly to rest over `watchdog_ramp`. An
/// emergency stop forces rest immediately and stays latched until released.
#[derive(Debug, Clone)]
pub struct TeleopReference {
    cfg: TeleopConfig,
    held: [f64; 2],
    last_rx: Option<f64>,
    last_stamp: Option<f64>,
    dropped: u64,
    estop: bool,
    output: [f64; 2],
    prev_output: Option<[f64; 2]>,
    diffs: VecDeque<[f64; 2]>,
}

impl TeleopReference {
    pub fn new(cfg: TeleopConfig) -> Self {
        Self {
            cfg,
            held: [0.0; 2],
            last_rx: None,
            last_stamp: None,
            dropped: 0,
            estop: false,
            output: [0.0; 2],
            prev_output: None,
            diffs: VecDeque::with_capacity(cfg.smoother_window.max(1)),
        }
    }

    pub fn config(&self) -> &TeleopConfig {
        &self.cfg
    }

    /// Accepts a command stamped `stamp` (any monotone clock) that arrived at
    /// simulation time `now`.
    pub fn push(&mut self, stamp: f64, v: [f64; 2], now: f64) -> Result<(), TeleopError> {
        if !v.iter().all(|x| x.is_finite()) || !stamp.is_finite() {
            self.dropped += 1;
            return Err(TeleopError::NonFinite);
        }
        if let Some(last) = self.last_stamp {
            if stamp < last {
                self.dropped += 1;
                return Err(TeleopError::OutOfOrder { stamp, last });
            }
        }
        if let Some(value) = v.iter().copied().find(|x| x.abs() > self.cfg.max_speed) {
            self.dropped += 1;
            return Err(TeleopError::TooFast { value, max: self.cfg.max_speed });
        }
        self.last_stamp = Some(stamp);
        self.last_rx = Some(now);
        self.held = v;
        Ok(())
    }

    /// Starts a new command stream (e.g. a different operator), forgetting the
    /// previous stream's timestamps.
    pub fn reset_stream(&mut self) {
        self.last_stamp = None;
    }

    pub fn estop(&mut self) {
        self.estop = true;
        self.held = [0.0; 2];
        self.output = [0.0; 2];
        self.prev_output = None;
        self.diffs.clear();
    }

    pub fn release(&mut self) {
        self.estop = false;
    }

    pub fn estopped(&self) -> bool {
        self.estop
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Command the stream is heading for at `now`, watchdog applied.
    fn target(&self, now: f64) -> [f64; 2] {
        if self.estop {
            return [0.0; 2];
        }
        let Some(rx) = self.last_rx else { return [0.0; 2] };
        let silence = now - rx - self.cfg.watchdog_timeout;
        if silence <= 0.0 {
            return self.held;
        }
        let keep = (1.0 - silence / self.cfg.watchdog_ramp).max(0.0);
        self.held.map(|v| v * keep)
    }

    /// Reference at `now`, one controller period `dt` after the previous call.
    pub fn sample(&mut self, now: f64, dt: f64) -> ReferenceSample {
        let target = self.target(now);
        let mut out = target;
        if let (Some(max), Some(prev)) = (self.cfg.max_accel, self.prev_output) {
            let step = max * dt;
            for i in 0..2 {
                out[i] = prev[i] + (target[i] - prev[i]).clamp(-step, step);
            }
        }
        let rate = match self.prev_output {
            Some(prev) if dt > 0.0 => {
                let raw = [(out[0] - prev[0]) / dt, (out[1] - prev[1]) / dt];
                if self.diffs.len() == self.cfg.smoother_window.max(1) {
                    self.diffs.pop_front();
                }
                self.diffs.push_back(raw);
                let n = self.diffs.len() as f64;
                let sum = self.diffs.iter().fold([0.0; 2], |acc, d| [acc[0] + d[0], acc[1] + d[1]]);
                [sum[0] / n, sum[1] / n]
            }
            _ => [0.0; 2],
        };
        self.prev_output = Some(out);
        self.output = out;
        ReferenceSample { t: now, v: out, rate }
    }

    pub fn current(&self) -> [f64; 2] {
        self.output
    }
}
