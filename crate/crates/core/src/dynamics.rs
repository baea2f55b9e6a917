//! Ground-truth plant: per-side wheel dynamics with a terrain-dependent slip
//! disturbance.
//!
//! Each wheeled side obeys
//!
//! ```text
//! dV_i/dt = g_i * U_i + d_i(V) + Δ_i(t),    Δ_i(t) = -(1 + s_i(t)) * F(t)
//! ```
//!
//! where `d_i` is the hidden actuation model and `F` the no-slip disturbance.
//! Controllers never see anything in this module; only the engine does.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Effort-to-acceleration conversion used when a scenario does not override it.
///
/// The control input is a normalized actuator effort, so `g` absorbs every unit
/// conversion between effort and side acceleration (m/s² per unit effort).
pub const DEFAULT_EFFORT_GAIN: f64 = 60.0;

/// Wheel side. Arrays indexed by side are always ordered `[right, left]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Right,
    Left,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Right, Side::Left];

    pub fn index(self) -> usize {
        match self {
            Side::Right => 0,
            Side::Left => 1,
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Right => Side::Left,
            Side::Left => Side::Right,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("slip ratio {0} outside the open interval (-1, 1)")]
    SlipOutOfRange(f64),
    #[error("slip ratio undefined for wheel speeds of opposite sign ({theoretical}, {actual})")]
    OppositeWheelSpeeds { theoretical: f64, actual: f64 },
    #[error("non-finite plant state or input: {0}")]
    NonFinite(&'static str),
}

/// Slip ratio of a wheel from its theoretical (commanded) and actual angular
/// velocity: `(ω_w - ω) / max(ω_w, ω)`.
///
/// Two conventions extend the forward-driving definition:
/// * both speeds zero gives `0` (a stationary wheel does not slip);
/// * reverse driving (both speeds negative) is evaluated on magnitudes, so a
///   wheel spinning faster than the ground still has positive slip.
///
/// Speeds of opposite sign have no slip ratio and return an error.
pub fn slip_ratio(omega_theoretical: f64, omega_actual: f64) -> Result<f64, DynamicsError> {
    if !omega_theoretical.is_finite() || !omega_actual.is_finite() {
        return Err(DynamicsError::NonFinite("wheel speed"));
    }
    if omega_theoretical == 0.0 && omega_actual == 0.0 {
        return Ok(0.0);
    }
    if omega_theoretical * omega_actual < 0.0 {
        return Err(DynamicsError::OppositeWheelSpeeds {
            theoretical: omega_theoretical,
            actual: omega_actual,
        });
    }
    let (w, a) = (omega_theoretical.abs(), omega_actual.abs());
    Ok((w - a) / w.max(a))
}

/// Slippage scaling of the nominal disturbance, `1 + s`.
pub fn slip_multiplier(s: f64) -> Result<f64, DynamicsError> {
    if !s.is_finite() {
        return Err(DynamicsError::NonFinite("slip ratio"));
    }
    if s.abs() >= 1.0 {
        return Err(DynamicsError::SlipOutOfRange(s));
    }
    Ok(1.0 + s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    /// Control effectiveness per side, `[right, left]`. Must be positive.
    pub g: [f64; 2],
    /// Viscous drag (1/s).
    pub c_visc: f64,
    /// Quadratic drag (1/m).
    pub c_quad: f64,
    /// Cross-side coupling (1/s).
    pub c_couple: f64,
    /// Wheel radius (m).
    pub wheel_radius: f64,
    /// Distance between the two wheeled sides (m).
    pub wheelbase: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            g: [DEFAULT_EFFORT_GAIN; 2],
            c_visc: 0.8,
            c_quad: 0.25,
            c_couple: 0.1,
            wheel_radius: 0.5,
            wheelbase: 1.85,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), String> {
        for (side, g) in Side::BOTH.iter().zip(self.g) {
            if !(g > 0.0 && g.is_finite()) {
                return Err(format!("control effectiveness g for {side:?} side must be positive, got {g}"));
            }
        }
        for (name, v) in [("c_visc", self.c_visc), ("c_quad", self.c_quad), ("c_couple", self.c_couple)] {
            if !v.is_finite() {
                return Err(format!("{name} must be finite"));
            }
        }
        if !(self.wheel_radius > 0.0) {
            return Err(format!("wheel_radius must be positive, got {}", self.wheel_radius));
        }
        if !(self.wheelbase > 0.0) {
            return Err(format!("wheelbase must be positive, got {}", self.wheelbase));
        }
        Ok(())
    }

    /// Hidden actuation model `d_i(V)` for one side.
    pub fn actuation(&self, side: Side, v: [f64; 2]) -> f64 {
        let own = v[side.index()];
        let other = v[side.other().index()];
        -self.c_visc * own - self.c_quad * own * own.abs() + self.c_couple * (other - own)
    }

    /// Angular speed the wheel must spin at to produce slip `s` while the side
    /// moves at `v`. Inverse of [`slip_ratio`] for forward motion.
    pub fn theoretical_wheel_speed(&self, v: f64, s: f64) -> Result<f64, DynamicsError> {
        slip_multiplier(s)?;
        let omega = v / self.wheel_radius;
        Ok(if s >= 0.0 { omega / (1.0 - s) } else { omega * (1.0 + s) })
    }
}

/// Closed slip-ratio interval for one side of a terrain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlipRange {
    pub lo: f64,
    pub hi: f64,
}

impl SlipRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.lo && s <= self.hi
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.lo <= self.hi) {
            return Err(format!("slip interval [{}, {}] is empty", self.lo, self.hi));
        }
        if !(self.lo > -1.0 && self.hi < 1.0) {
            return Err(format!("slip interval [{}, {}] must lie inside (-1, 1)", self.lo, self.hi));
        }
        Ok(())
    }
}

/// No-slip disturbance `F(t) = A sin(2π f t) + B` (m/s²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Disturbance {
    pub amplitude: f64,
    pub frequency_hz: f64,
    pub bias: f64,
}

impl Default for Disturbance {
    fn default() -> Self {
        Self { amplitude: 0.2, frequency_hz: 0.08, bias: 0.1 }
    }
}

impl Disturbance {
    pub const ZERO: Disturbance = Disturbance { amplitude: 0.0, frequency_hz: 0.0, bias: 0.0 };

    pub fn at(&self, t: f64) -> f64 {
        self.amplitude * (std::f64::consts::TAU * self.frequency_hz * t).sin() + self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainModel {
    pub name: String,
    pub slip_left: SlipRange,
    pub slip_right: SlipRange,
    /// Seconds between slip-target draws.
    #[serde(default = "default_resample_period")]
    pub resample_period: f64,
    /// Time constant of the first-order filter pulling slip toward its target.
    #[serde(default = "default_smoothing_tau")]
    pub smoothing_tau: f64,
    #[serde(default)]
    pub disturbance: Disturbance,
}

fn default_resample_period() -> f64 {
    2.0
}

fn default_smoothing_tau() -> f64 {
    0.3
}

/// Surfaces and slip ranges `(name, left, right)` of the built-in terrains.
const SURFACES: [(&str, SlipRange, SlipRange); 5] = [
    ("Dry asphalt", SlipRange::new(0.05, 0.40), SlipRange::new(0.05, 0.20)),
    ("Wet asphalt", SlipRange::new(0.05, 0.80), SlipRange::new(0.05, 0.50)),
    ("Gravel", SlipRange::new(0.05, 0.50), SlipRange::new(0.05, 0.40)),
    ("Mud", SlipRange::new(0.05, 0.70), SlipRange::new(0.05, 0.50)),
    ("Ice", SlipRange::new(0.05, 0.90), SlipRange::new(0.05, 0.75)),
];

impl TerrainModel {
    pub fn new(name: impl Into<String>, slip_left: SlipRange, slip_right: SlipRange) -> Self {
        Self {
            name: name.into(),
            slip_left,
            slip_right,
            resample_period: default_resample_period(),
            smoothing_tau: default_smoothing_tau(),
            disturbance: Disturbance::default(),
        }
    }

    /// The five built-in surfaces, ordered from least to most slippery.
    pub fn builtins() -> Vec<TerrainModel> {
        SURFACES.iter().map(|(n, l, r)| TerrainModel::new(*n, *l, *r)).collect()
    }

    /// Looks up a built-in surface. Matching ignores case, spaces, dashes and
    /// underscores, so `"dry-asphalt"` and `"Dry asphalt"` are the same.
    /// `"no-slip"` names an extra zero-slip surface that is not part of the table.
    pub fn builtin(name: &str) -> Option<TerrainModel> {
        let key = normalize_name(name);
        if key == "noslip" {
            return Some(Self::no_slip());
        }
        SURFACES
            .iter()
            .find(|(n, _, _)| normalize_name(n) == key)
            .map(|(n, l, r)| TerrainModel::new(*n, *l, *r))
    }

    pub fn builtin_names() -> Vec<&'static str> {
        SURFACES.iter().map(|(n, _, _)| *n).collect()
    }

    /// Slip held at exactly zero on both sides.
    pub fn no_slip() -> TerrainModel {
        TerrainModel::new("No slip", SlipRange::new(0.0, 0.0), SlipRange::new(0.0, 0.0))
    }

    pub fn with_disturbance(mut self, disturbance: Disturbance) -> Self {
        self.disturbance = disturbance;
        self
    }

    pub fn range(&self, side: Side) -> SlipRange {
        match side {
            Side::Right => self.slip_right,
            Side::Left => self.slip_left,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.slip_left.validate().map_err(|e| format!("slip_left: {e}"))?;
        self.slip_right.validate().map_err(|e| format!("slip_right: {e}"))?;
        if !(self.resample_period > 0.0) {
            return Err(format!("resample_period must be positive, got {}", self.resample_period));
        }
        if !(self.smoothing_tau > 0.0) {
            return Err(format!("smoothing_tau must be positive, got {}", self.smoothing_tau));
        }
        let d = &self.disturbance;
        if !(d.amplitude.is_finite() && d.frequency_hz.is_finite() && d.bias.is_finite()) {
            return Err("disturbance parameters must be finite".into());
        }
        Ok(())
    }
}

fn normalize_name(name: &str) -> String {
    name.chars()
        .filter(|c| !matches!(c, ' ' | '-' | '_'))
        .flat_map(char::to_lowercase)
        .collect()
}

/// Uniform draw from the side's slip interval.
pub fn resample_slip<R: Rng + ?Sized>(terrain: &TerrainModel, side: Side, rng: &mut R) -> f64 {
    let r = terrain.range(side);
    if r.lo == r.hi {
        return r.lo;
    }
    rng.gen_range(r.lo..=r.hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// Side velocities `[V_R, V_L]` (m/s).
    pub v: [f64; 2],
    /// Smoothed slip ratios `[s_R, s_L]`.
    pub slip: [f64; 2],
    /// Latest resampled slip targets.
    pub slip_target: [f64; 2],
    pub t: f64,
    /// Time of the next slip-target draw.
    pub next_resample: f64,
    /// Number of slip-target draws so far, the initial one included.
    pub resample_count: u64,
}

impl PlantState {
    /// Plant at velocity `v`, with the first slip targets drawn at `t = 0` and
    /// the smoothed slip starting on them.
    pub fn new<R: Rng + ?Sized>(v: [f64; 2], terrain: &TerrainModel, rng: &mut R) -> Self {
        let target = [resample_slip(terrain, Side::Right, rng), resample_slip(terrain, Side::Left, rng)];
        Self {
            v,
            slip: target,
            slip_target: target,
            t: 0.0,
            next_resample: terrain.resample_period,
            resample_count: 1,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(&self.slip).all(|x| x.is_finite()) && self.t.is_finite()
    }
}

/// Side accelerations for velocities `v` at time `t` with slip held at `slip`.
pub fn side_accelerations(
    v: [f64; 2],
    t: f64,
    slip: [f64; 2],
    u: [f64; 2],
    params: &PlantParams,
    disturbance: &Disturbance,
) -> [f64; 2] {
    let f = disturbance.at(t);
    let mut out = [0.0; 2];
    for side in Side::BOTH {
        let i = side.index();
        out[i] = params.g[i] * u[i] + params.actuation(side, v) - (1.0 + slip[i]) * f;
    }
    out
}

/// `dV/dt` of both sides at the given state and control input.
pub fn plant_derivative(
    state: &PlantState,
    u: [f64; 2],
    params: &PlantParams,
    terrain: &TerrainModel,
) -> Result<[f64; 2], DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite("plant state"));
    }
    if !u.iter().all(|x| x.is_finite()) {
        return Err(DynamicsError::NonFinite("control input"));
    }
    for s in state.slip {
        slip_multiplier(s)?;
    }
    Ok(side_accelerations(state.v, state.t, state.slip, u, params, &terrain.disturbance))
}

/// One classical fourth-order Runge-Kutta step of `dy/dt = f(t, y)`.
pub fn rk4_step<const N: usize, F>(f: F, t: f64, y: [f64; N], h: f64) -> [f64; N]
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let axpy = |a: f64, x: &[f64; N], y: &[f64; N]| -> [f64; N] {
        let mut out = *y;
        for (o, xi) in out.iter_mut().zip(x) {
            *o += a * xi;
        }
        out
    };
    let k1 = f(t, &y);
    let k2 = f(t + 0.5 * h, &axpy(0.5 * h, &k1, &y));
    let k3 = f(t + 0.5 * h, &axpy(0.5 * h, &k2, &y));
    let k4 = f(t + h, &axpy(h, &k3, &y));
    let mut out = y;
    for i in 0..N {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Integrates the side velocities over `[state.t, state.t + dt]` with the
/// control and slip held constant. Slip and time are left untouched; see
/// [`advance_slip`].
pub fn integrate_velocities(
    state: &PlantState,
    u: [f64; 2],
    params: &PlantParams,
    terrain: &TerrainModel,
    dt: f64,
) -> Result<[f64; 2], DynamicsError> {
    plant_derivative(state, u, params, terrain)?;
    let slip = state.slip;
    let v = rk4_step(
        |t, v| side_accelerations(*v, t, slip, u, params, &terrain.disturbance),
        state.t,
        state.v,
        dt,
    );
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(DynamicsError::NonFinite("integrated velocity"))
    }
}

/// Advances the slip process by `dt`: draws fresh targets when a resample is
/// due at the current time, then relaxes the smoothed slip toward the targets
/// with the exact first-order step `s += (target - s)(1 - e^{-dt/τ})`.
pub fn advance_slip<R: Rng + ?Sized>(state: &PlantState, terrain: &TerrainModel, dt: f64, rng: &mut R) -> PlantState {
    debug_assert!(dt > 0.0);
    let mut next = *state;
    if state.t >= state.next_resample - 1e-9 {
        next.slip_target = [resample_slip(terrain, Side::Right, rng), resample_slip(terrain, Side::Left, rng)];
        next.next_resample += terrain.resample_period;
        next.resample_count += 1;
    }
    let blend = 1.0 - (-dt / terrain.smoothing_tau).exp();
    for i in 0..2 {
        next.slip[i] += (next.slip_target[i] - next.slip[i]) * blend;
    }
    next.t = state.t + dt;
    next
}
