//! Per-side tracking controllers: the RBFNN-based robust model-free adaptive
//! controller (NN-RMFC) and a PID baseline.
//!
//! Both consume only an [`Observation`]: the side's tracking error, the
//! measured velocity pair and the reference derivative. Nothing here knows the
//! plant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rbfnn::RbfNetwork;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("controller input `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("gain `{name}` must be positive, got {value}")]
    NonPositiveGain { name: &'static str, value: f64 },
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    /// Linear decay of the adaptive scalar (1/s).
    pub kappa: f64,
    /// Cubic damping of the adaptive scalar.
    pub epsilon: f64,
    /// Excitation gain shared by the adaptive law and the control law.
    pub sigma: f64,
    /// Proportional-like gain.
    pub gamma: f64,
}

impl ControllerGains {
    pub fn validate(&self) -> Result<(), ControllerError> {
        for (name, value) in [
            ("kappa", self.kappa),
            ("epsilon", self.epsilon),
            ("sigma", self.sigma),
            ("gamma", self.gamma),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ControllerError::NonPositiveGain { name, value });
            }
        }
        Ok(())
    }
}

/// Published gain sets together with their network size and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Gains of the slippery-terrain simulation study.
    SimPaper,
    /// Gains of the snowy-terrain field experiment.
    FieldPaper,
}

impl Preset {
    pub fn gains(self) -> ControllerGains {
        match self {
            Preset::SimPaper => ControllerGains { kappa: 1.2, epsilon: 0.04, sigma: 11.5, gamma: 1.6 },
            Preset::FieldPaper => ControllerGains { kappa: 1.9, epsilon: 0.08, sigma: 17.1, gamma: 3.6 },
        }
    }

    pub fn neurons(self) -> usize {
        match self {
            Preset::SimPaper => 9,
            Preset::FieldPaper => 8,
        }
    }

    pub fn width(self) -> f64 {
        match self {
            Preset::SimPaper => 0.13,
            Preset::FieldPaper => 0.15,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::SimPaper => "sim-paper",
            Preset::FieldPaper => "field-paper",
        }
    }
}

/// What a side controller is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Tracking error `V_i - V_id` (m/s).
    pub error: f64,
    /// Measured velocity pair `[V_R, V_L]` (m/s).
    pub velocity: [f64; 2],
    /// Reference derivative `dV_id/dt` (m/s²).
    pub reference_rate: f64,
}

/// NN-RMFC control law:
/// `U = -γe/2 - e(‖Φ‖² + 2 + V̇_d²)/2 - σ e ‖Φ‖ φ̂²`.
pub fn nnrmfc_control(error: f64, phi_norm: f64, reference_rate: f64, phi_hat: f64, gains: &ControllerGains) -> f64 {
    -0.5 * gains.gamma * error
        - 0.5 * error * (phi_norm * phi_norm + 2.0 + reference_rate * reference_rate)
        - gains.sigma * error * phi_norm * phi_hat * phi_hat
}

/// Adaptive law: `dφ̂/dt = -κφ̂ - εφ̂³ + σ e² ‖Φ‖ φ̂`.
pub fn adaptive_derivative(phi_hat: f64, error: f64, phi_norm: f64, gains: &ControllerGains) -> f64 {
    -gains.kappa * phi_hat - gains.epsilon * phi_hat.powi(3) + gains.sigma * error * error * phi_norm * phi_hat
}

/// Explicit Euler on the adaptive law, split into substeps so that
/// `ε φ̂² h ≤ 0.5` holds on every substep.
pub fn integrate_adaptive(phi_hat: f64, error: f64, phi_norm: f64, gains: &ControllerGains, dt: f64) -> f64 {
    let mut phi = phi_hat;
    let mut remaining = dt;
    while remaining > 0.0 {
        let stiff = gains.epsilon * phi * phi;
        let h = if stiff * remaining > 0.5 { 0.5 / stiff } else { remaining };
        phi += h * adaptive_derivative(phi, error, phi_norm, gains);
        remaining -= h;
        if !phi.is_finite() {
            break;
        }
    }
    phi
}

/// Per-side NN-RMFC state: the fixed network and the adaptive scalar φ̂.
#[derive(Debug, Clone, PartialEq)]
pub struct NnrmfcState {
    pub net: RbfNetwork,
    pub phi_hat: f64,
    /// Symmetric bound on φ̂.
    pub clamp: f64,
}

/// One controller update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub u: f64,
    /// φ̂ used to compute `u` (before the adaptive update). Zero for PID.
    pub phi_hat: f64,
    /// ‖Φ(V)‖ at the measured velocity. Zero for PID.
    pub phi_norm: f64,
    /// The adaptive scalar hit its safety bound on this update.
    pub clamped: bool,
}

fn check_finite(obs: &Observation) -> Result<(), ControllerError> {
    if !obs.error.is_finite() {
        return Err(ControllerError::NonFinite("error"));
    }
    if !obs.velocity.iter().all(|v| v.is_finite()) {
        return Err(ControllerError::NonFinite("velocity"));
    }
    if !obs.reference_rate.is_finite() {
        return Err(ControllerError::NonFinite("reference_rate"));
    }
    Ok(())
}

/// Computes the control from the current φ̂, then advances φ̂ by `dt`.
pub fn controller_step(
    state: &NnrmfcState,
    obs: &Observation,
    gains: &ControllerGains,
    dt: f64,
) -> Result<(ControlOutput, NnrmfcState), ControllerError> {
    if !(dt > 0.0) {
        return Err(ControllerError::BadStep(dt));
    }
    check_finite(obs)?;
    if !state.phi_hat.is_finite() {
        return Err(ControllerError::NonFinite("phi_hat"));
    }
    let phi_norm = state.net.basis_norm(obs.velocity);
    let u = nnrmfc_control(obs.error, phi_norm, obs.reference_rate, state.phi_hat, gains);

    let raw = integrate_adaptive(state.phi_hat, obs.error, phi_norm, gains, dt);
    let clamped = !(raw.abs() <= state.clamp);
    let phi_hat = if raw.is_nan() { state.clamp.copysign(state.phi_hat) } else { raw.clamp(-state.clamp, state.clamp) };

    let next = NnrmfcState { phi_hat, ..state.clone() };
    Ok((ControlOutput { u, phi_hat: state.phi_hat, phi_norm, clamped }, next))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Symmetric bound on the integral state (m).
    pub integral_clamp: f64,
    /// Time constant of the derivative low-pass filter (s).
    #[serde(default = "default_derivative_tau")]
    pub derivative_tau: f64,
}

fn default_derivative_tau() -> f64 {
    0.01
}

impl PidGains {
    /// The baseline loop gains (`kp = 4 /s`, `ki = 2 /s²`, `kd = 0.1`,
    /// integral clamp 2), fixed on dry asphalt, expressed in effort units
    /// for a plant whose effort-to-acceleration gain is `effort_gain`.
    pub fn baseline(effort_gain: f64) -> Self {
        Self {
            kp: 4.0 / effort_gain,
            ki: 2.0 / effort_gain,
            kd: 0.1 / effort_gain,
            integral_clamp: 2.0,
            derivative_tau: default_derivative_tau(),
        }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        for (name, value) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ControllerError::NonPositiveGain { name, value });
            }
        }
        if !(self.integral_clamp > 0.0) {
            return Err(ControllerError::NonPositiveGain { name: "integral_clamp", value: self.integral_clamp });
        }
        if !(self.derivative_tau >= 0.0) {
            return Err(ControllerError::NonPositiveGain { name: "derivative_tau", value: self.derivative_tau });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    pub integral: f64,
    pub derivative: f64,
    pub prev_error: Option<f64>,
}

/// Positional PID acting on `-e`, with a clamped integral and a first-order
/// filtered derivative. The first update has no derivative.
pub fn pid_step(state: &PidState, gains: &PidGains, error: f64, dt: f64) -> Result<(f64, PidState), ControllerError> {
    if !(dt > 0.0) {
        return Err(ControllerError::BadStep(dt));
    }
    if !error.is_finite() {
        return Err(ControllerError::NonFinite("error"));
    }
    let drive = -error;
    let integral = (state.integral + drive * dt).clamp(-gains.integral_clamp, gains.integral_clamp);
    let derivative = match state.prev_error {
        Some(prev) => {
            let raw = (prev - error) / dt;
            let blend = dt / (gains.derivative_tau + dt);
            state.derivative + blend * (raw - state.derivative)
        }
        None => 0.0,
    };
    let u = gains.kp * drive + gains.ki * integral + gains.kd * derivative;
    Ok((u, PidState { integral, derivative, prev_error: Some(error) }))
}

/// A side controller as held by the engine.
#[derive(Debug, Clone, PartialEq)]
pub enum SideController {
    Nnrmfc { state: NnrmfcState, gains: ControllerGains },
    Pid { state: PidState, gains: PidGains },
}

impl SideController {
    pub fn step(&mut self, obs: &Observation, dt: f64) -> Result<ControlOutput, ControllerError> {
        match self {
            SideController::Nnrmfc { state, gains } => {
                let (out, next) = controller_step(state, obs, gains, dt)?;
                *state = next;
                Ok(out)
            }
            SideController::Pid { state, gains } => {
                check_finite(obs)?;
                let (u, next) = pid_step(state, gains, obs.error, dt)?;
                *state = next;
                Ok(ControlOutput { u, phi_hat: 0.0, phi_norm: 0.0, clamped: false })
            }
        }
    }

    pub fn phi_hat(&self) -> Option<f64> {
        match self {
            SideController::Nnrmfc { state, .. } => Some(state.phi_hat),
            SideController::Pid { .. } => None,
        }
    }
}
