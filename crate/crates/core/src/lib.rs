//! Slip-affected skid-steer wheel dynamics with an RBFNN-assisted adaptive
//! velocity controller, a PID baseline, and deterministic closed-loop
//! simulation.
//!
//! The plant ([`dynamics`]) is hidden from the controllers ([`controller`]);
//! the [`engine`] is the only module that sees both. Runs are recorded as
//! [`trace::SimTrace`]s and judged by [`metrics`].

pub mod config;
pub mod controller;
pub mod dynamics;
pub mod engine;
pub mod metrics;
pub mod rbfnn;
pub mod reference;
pub mod trace;
pub mod tuning;

pub use config::{ConfigError, ControllerKind, ScenarioConfig, TerrainSpec};
pub use engine::{run_batch, run_scenario, run_sweep, Simulator, SweepOptions};
pub use trace::SimTrace;
