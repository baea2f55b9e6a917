//! Scenario configuration: a versioned TOML document describing one
//! closed-loop run.
//!
//! ```toml
//! schema = "skidsim.scenario.v1"
//! id = "ice-step"
//! seed = 7
//! duration = 30.0
//! terrain = "Ice"              # or an inline [terrain] table
//!
//! [controller]
//! kind = "nnrmfc"              # or "pid"
//! preset = "sim-paper"
//!
//! [profile]
//! kind = "step"
//! v_r = 0.5
//! v_l = 0.5
//! ```
//!
//! Every error carries the line of the offending key so it can be reported as
//! `path:line: message`.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerGains, NnrmfcState, PidGains, PidState, Preset, SideController};
use crate::dynamics::{PlantParams, TerrainModel};
use crate::rbfnn::RbfNetwork;
use crate::reference::{ReferenceProfile, TeleopConfig};

pub const SCHEMA_ID: &str = "skidsim.scenario.v1";

/// A configuration problem, anchored to a 1-based source line when known.
#[derive(Debug, Error, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl ConfigError {
    fn new(line: Option<usize>, message: impl Into<String>) -> Self {
        Self { line, message: message.into() }
    }

    /// `path:line: message`, the form editors and CI logs recognise.
    pub fn render(&self, path: &Path) -> String {
        match self.line {
            Some(line) => format!("{}:{line}: {}", path.display(), self.message),
            None => format!("{}: {}", path.display(), self.message),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    #[default]
    Nnrmfc,
    Pid,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Nnrmfc => "nnrmfc",
            ControllerKind::Pid => "pid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TerrainSpec {
    Named(String),
    Inline(TerrainModel),
}

impl Default for TerrainSpec {
    fn default() -> Self {
        TerrainSpec::Named("Dry asphalt".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub preset: Preset,
    /// Per-gain overrides of the preset.
    pub kappa: Option<f64>,
    pub epsilon: Option<f64>,
    pub sigma: Option<f64>,
    pub gamma: Option<f64>,
    /// Initial adaptive scalar. Zero is an invariant point of the adaptive
    /// law, so adaptation would never start from it.
    pub phi_hat0: f64,
    /// Symmetric safety bound on the adaptive scalar.
    pub clamp: f64,
    /// PID gains; defaults to the baseline for the plant's effort gain.
    pub pid: Option<PidGains>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kind: ControllerKind::Nnrmfc,
            preset: Preset::SimPaper,
            kappa: None,
            epsilon: None,
            sigma: None,
            gamma: None,
            phi_hat0: 0.1,
            clamp: 100.0,
            pid: None,
        }
    }
}

impl ControllerConfig {
    pub fn gains(&self) -> ControllerGains {
        let base = self.preset.gains();
        ControllerGains {
            kappa: self.kappa.unwrap_or(base.kappa),
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            sigma: self.sigma.unwrap_or(base.sigma),
            gamma: self.gamma.unwrap_or(base.gamma),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbfConfig {
    /// Seed for center placement; the scenario seed when absent.
    pub seed: Option<u64>,
    /// Neuron count; the preset's when absent.
    pub neurons: Option<usize>,
    /// Shared Gaussian width; the preset's when absent.
    pub width: Option<f64>,
    pub center_scale: f64,
    /// Explicit centers, used for both sides instead of random placement.
    pub centers: Option<Vec<[f64; 2]>>,
}

impl Default for RbfConfig {
    fn default() -> Self {
        Self { seed: None, neurons: None, width: None, center_scale: 1.0, centers: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: String,
    #[serde(default = "default_id")]
    pub id: String,
    /// Master seed: slip process and, unless overridden, RBF centers.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_dt_plant")]
    pub dt_plant: f64,
    #[serde(default = "default_controller_rate")]
    pub controller_rate_hz: f64,
    #[serde(default)]
    pub initial_velocity: [f64; 2],
    #[serde(default)]
    pub terrain: TerrainSpec,
    #[serde(default)]
    pub plant: PlantParams,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub rbfnn: RbfConfig,
    #[serde(default = "ReferenceProfile::curved_path")]
    pub profile: ReferenceProfile,
    #[serde(default)]
    pub teleop: TeleopConfig,
}

fn default_id() -> String {
    "scenario".into()
}
fn default_duration() -> f64 {
    200.0
}
fn default_dt_plant() -> f64 {
    0.001
}
fn default_controller_rate() -> f64 {
    1000.0
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_ID.into(),
            id: default_id(),
            seed: 0,
            duration: default_duration(),
            dt_plant: default_dt_plant(),
            controller_rate_hz: default_controller_rate(),
            initial_velocity: [0.0; 2],
            terrain: TerrainSpec::default(),
            plant: PlantParams::default(),
            controller: ControllerConfig::default(),
            rbfnn: RbfConfig::default(),
            profile: ReferenceProfile::curved_path(),
            teleop: TeleopConfig::default(),
        }
    }
}

impl ScenarioConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(source: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|span| line_of_offset(source, span.start));
            ConfigError::new(line, e.message().to_string())
        })?;
        cfg.validate().map_err(|(table, key, message)| ConfigError::new(locate(source, table, key), message))?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(None, format!("cannot read config: {e}")))?;
        Self::from_toml(&source)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config always serializes")
    }

    /// Checks every invariant without source positions. Returns the offending
    /// `(table, key, message)` on failure.
    pub fn check(&self) -> Result<(), ConfigError> {
        self.validate().map_err(|(_, _, message)| ConfigError::new(None, message))
    }

    fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        let top = |key, message: String| ("", key, message);
        if self.schema != SCHEMA_ID {
            return Err(top("schema", format!("unsupported schema `{}`, expected `{SCHEMA_ID}`", self.schema)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(top("duration", format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.dt_plant > 0.0 && self.dt_plant.is_finite()) {
            return Err(top("dt_plant", format!("dt_plant must be positive, got {}", self.dt_plant)));
        }
        if !(self.controller_rate_hz > 0.0 && self.controller_rate_hz.is_finite()) {
            return Err(top(
                "controller_rate_hz",
                format!("controller_rate_hz must be positive, got {}", self.controller_rate_hz),
            ));
        }
        let ratio = 1.0 / (self.controller_rate_hz * self.dt_plant);
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-6 {
            return Err(top(
                "controller_rate_hz",
                format!(
                    "controller period {} s is not an integer multiple of dt_plant {} s",
                    1.0 / self.controller_rate_hz,
                    self.dt_plant
                ),
            ));
        }
        if !self.initial_velocity.iter().all(|v| v.is_finite()) {
            return Err(top("initial_velocity", "initial_velocity must be finite".into()));
        }
        match &self.terrain {
            TerrainSpec::Named(name) => {
                if TerrainModel::builtin(name).is_none() {
                    return Err(top(
                        "terrain",
                        format!("unknown terrain `{name}`; built-in: {}, No slip", TerrainModel::builtin_names().join(", ")),
                    ));
                }
            }
            TerrainSpec::Inline(t) => t.validate().map_err(|m| ("terrain", "name", m))?,
        }
        self.plant.validate().map_err(|m| ("plant", "g", m))?;

        let c = &self.controller;
        let gains = c.gains();
        gains.validate().map_err(|e| {
            let key = match &e {
                crate::controller::ControllerError::NonPositiveGain { name, .. } => *name,
                _ => "preset",
            };
            ("controller", key, e.to_string())
        })?;
        if !(c.phi_hat0.is_finite() && c.phi_hat0 != 0.0) {
            return Err((
                "controller",
                "phi_hat0",
                format!("phi_hat0 must be finite and nonzero, got {}", c.phi_hat0),
            ));
        }
        if !(c.clamp > 0.0) || c.phi_hat0.abs() > c.clamp {
            return Err(("controller", "clamp", format!("clamp must be positive and at least |phi_hat0|, got {}", c.clamp)));
        }
        if let Some(pid) = &c.pid {
            pid.validate().map_err(|e| ("controller.pid", "kp", e.to_string()))?;
        }

        let r = &self.rbfnn;
        if r.neurons == Some(0) {
            return Err(("rbfnn", "neurons", "neurons must be at least 1".into()));
        }
        if let Some(w) = r.width {
            if !(w > 0.0 && w.is_finite()) {
                return Err(("rbfnn", "width", format!("width must be positive, got {w}")));
            }
        }
        if !(r.center_scale > 0.0 && r.center_scale.is_finite()) {
            return Err(("rbfnn", "center_scale", format!("center_scale must be positive, got {}", r.center_scale)));
        }
        if let Some(centers) = &r.centers {
            RbfNetwork::with_shared_width(centers.clone(), self.rbf_width())
                .map_err(|e| ("rbfnn", "centers", e.to_string()))?;
        }
        self.profile.validate().map_err(|e| ("profile", "kind", e.to_string()))?;
        let t = &self.teleop;
        if !(t.watchdog_timeout >= 0.0 && t.watchdog_ramp > 0.0 && t.max_speed > 0.0 && t.smoother_window >= 1) {
            return Err(("teleop", "watchdog_timeout", "teleop timings, window and max_speed must be positive".into()));
        }
        if let Some(a) = t.max_accel {
            if !(a > 0.0) {
                return Err(("teleop", "max_accel", format!("max_accel must be positive, got {a}")));
            }
        }
        Ok(())
    }

    pub fn terrain_model(&self) -> TerrainModel {
        match &self.terrain {
            TerrainSpec::Named(name) => TerrainModel::builtin(name).expect("validated terrain name"),
            TerrainSpec::Inline(t) => t.clone(),
        }
    }

    pub fn rbf_width(&self) -> f64 {
        self.rbfnn.width.unwrap_or(self.controller.preset.width())
    }

    pub fn rbf_neurons(&self) -> usize {
        self.rbfnn.neurons.unwrap_or(self.controller.preset.neurons())
    }

    pub fn rbf_seed(&self) -> u64 {
        self.rbfnn.seed.unwrap_or(self.seed)
    }

    pub fn substeps(&self) -> usize {
        (1.0 / (self.controller_rate_hz * self.dt_plant)).round() as usize
    }

    pub fn controller_period(&self) -> f64 {
        self.dt_plant * self.substeps() as f64
    }

    pub fn ticks(&self) -> usize {
        (self.duration / self.controller_period() - 1e-9).ceil() as usize
    }

    /// One network per side: right first, then left, from the same stream.
    pub fn networks(&self) -> Result<[RbfNetwork; 2], ConfigError> {
        let width = self.rbf_width();
        let build = |rng: &mut ChaCha8Rng| match &self.rbfnn.centers {
            Some(c) => RbfNetwork::with_shared_width(c.clone(), width),
            None => RbfNetwork::init_centers(self.rbf_neurons(), width, self.rbfnn.center_scale, rng),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.rbf_seed());
        let right = build(&mut rng).map_err(|e| ConfigError::new(None, e.to_string()))?;
        let left = build(&mut rng).map_err(|e| ConfigError::new(None, e.to_string()))?;
        Ok([right, left])
    }

    pub fn side_controllers(&self) -> Result<[SideController; 2], ConfigError> {
        let c = &self.controller;
        Ok(match c.kind {
            ControllerKind::Nnrmfc => {
                let gains = c.gains();
                self.networks()?.map(|net| SideController::Nnrmfc {
                    state: NnrmfcState { net, phi_hat: c.phi_hat0, clamp: c.clamp },
                    gains,
                })
            }
            ControllerKind::Pid => {
                let pid = self.pid_gains();
                [
                    SideController::Pid { state: PidState::default(), gains: pid[0] },
                    SideController::Pid { state: PidState::default(), gains: pid[1] },
                ]
            }
        })
    }

    /// Explicit gains apply to both sides; otherwise each side gets the
    /// baseline scaled by its own effort gain.
    pub fn pid_gains(&self) -> [PidGains; 2] {
        match self.controller.pid {
            Some(p) => [p, p],
            None => self.plant.g.map(PidGains::baseline),
        }
    }
}

fn line_of_offset(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line of `key` inside `[table]` (`""` for top level), falling back to the
/// table header, then to nothing.
fn locate(source: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == table {
                header = Some(i + 1);
            }
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs = lhs.trim();
        if current == table && lhs == key {
            return Some(i + 1);
        }
        // Dotted keys at top level, e.g. `controller.gamma = 0`.
        if current.is_empty() && !table.is_empty() && lhs == format!("{table}.{key}") {
            return Some(i + 1);
        }
        // Inline tables at top level, e.g. `terrain = { ... }`.
        if current.is_empty() && !table.is_empty() && lhs == table {
            header = header.or(Some(i + 1));
        }
    }
    header
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema = \"skidsim.scenario.v1\"\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ScenarioConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        assert_eq!(cfg.substeps(), 1);
        assert_eq!(cfg.ticks(), 200_000);
        assert_eq!(cfg.terrain_model().name, "Dry asphalt");
    }

    #[test]
    fn roundtrips_through_toml() {
        let mut cfg = ScenarioConfig::default();
        cfg.profile = ReferenceProfile::step();
        cfg.controller.kind = ControllerKind::Pid;
        cfg.rbfnn.seed = Some(4);
        let back = ScenarioConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn zero_duration_is_anchored() {
        let src = "schema = \"skidsim.scenario.v1\"\nseed = 1\nduration = 0\n";
        let err = ScenarioConfig::from_toml(src).unwrap_err();
        assert_eq!(err.line, Some(3));
        assert!(err.message.contains("duration"));
        assert_eq!(err.render(Path::new("a.toml")), format!("a.toml:3: {}", err.message));
    }

    #[test]
    fn nonpositive_gain_is_anchored_to_its_key() {
        let src = "schema = \"skidsim.scenario.v1\"\n\n[controller]\npreset = \"sim-paper\"\ngamma = 0.0\n";
        let err = ScenarioConfig::from_toml(src).unwrap_err();
        assert_eq!(err.line, Some(5), "{err}");
        assert!(err.message.contains("gamma"));
    }

    #[test]
    fn syntax_and_type_errors_carry_lines() {
        let err = ScenarioConfig::from_toml("schema = \"skidsim.scenario.v1\"\nseed = \"x\"\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        let err = ScenarioConfig::from_toml("schema = \"skidsim.scenario.v1\"\nbogus = 1\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        assert!(err.message.contains("bogus"));
        assert!(ScenarioConfig::from_toml("seed = 1\n").unwrap_err().message.contains("schema"));
    }

    #[test]
    fn controller_period_must_divide() {
        let src = "schema = \"skidsim.scenario.v1\"\ndt_plant = 0.001\ncontroller_rate_hz = 300\n";
        let err = ScenarioConfig::from_toml(src).unwrap_err();
        assert_eq!(err.line, Some(3));
        let ok = "schema = \"skidsim.scenario.v1\"\ndt_plant = 0.001\ncontroller_rate_hz = 100\n";
        assert_eq!(ScenarioConfig::from_toml(ok).unwrap().substeps(), 10);
    }

    #[test]
    fn terrain_by_name_or_inline() {
        let named = ScenarioConfig::from_toml("schema = \"skidsim.scenario.v1\"\nterrain = \"ice\"\n").unwrap();
        assert_eq!(named.terrain_model().name, "Ice");
        let inline = "schema = \"skidsim.scenario.v1\"\n[terrain]\nname = \"Sand\"\nslip_left = { lo = 0.1, hi = 0.3 }\nslip_right = { lo = 0.1, hi = 0.2 }\n";
        let cfg = ScenarioConfig::from_toml(inline).unwrap();
        assert_eq!(cfg.terrain_model().slip_left.hi, 0.3);
        let bad = "schema = \"skidsim.scenario.v1\"\nterrain = \"lava\"\n";
        assert_eq!(ScenarioConfig::from_toml(bad).unwrap_err().line, Some(2));
        let out_of_range = "schema = \"skidsim.scenario.v1\"\n[terrain]\nname = \"X\"\nslip_left = { lo = 0.1, hi = 1.0 }\nslip_right = { lo = 0.1, hi = 0.2 }\n";
        assert!(ScenarioConfig::from_toml(out_of_range).is_err());
    }

    #[test]
    fn networks_follow_seed_and_preset() {
        let mut cfg = ScenarioConfig::default();
        cfg.seed = 11;
        let [r, l] = cfg.networks().unwrap();
        assert_eq!((r.len(), l.len()), (9, 9));
        assert_ne!(r, l);
        assert_eq!(cfg.networks().unwrap()[0], r);
        cfg.controller.preset = Preset::FieldPaper;
        assert_eq!(cfg.networks().unwrap()[0].len(), 8);
        cfg.rbfnn.seed = Some(3);
        cfg.seed = 99;
        let a = cfg.networks().unwrap();
        cfg.seed = 100;
        assert_eq!(cfg.networks().unwrap(), a);
    }

    #[test]
    fn zero_phi_hat0_is_rejected() {
        let src = "schema = \"skidsim.scenario.v1\"\n[controller]\nphi_hat0 = 0.0\n";
        assert_eq!(ScenarioConfig::from_toml(src).unwrap_err().line, Some(3));
    }

    #[test]
    fn pid_defaults_scale_with_each_side() {
        let mut cfg = ScenarioConfig::default();
        cfg.controller.kind = ControllerKind::Pid;
        cfg.plant.g = [30.0, 60.0];
        let [r, l] = cfg.side_controllers().unwrap();
        match (r, l) {
            (SideController::Pid { gains: gr, .. }, SideController::Pid { gains: gl, .. }) => {
                assert!((gr.kp - 4.0 / 30.0).abs() < 1e-15 && (gl.kp - 4.0 / 60.0).abs() < 1e-15);
            }
            _ => panic!("expected PID"),
        }
    }
}
