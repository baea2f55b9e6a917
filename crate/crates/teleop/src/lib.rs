//! Real-time teleoperation service for the skid-steer simulator.
//!
//! A WebSocket endpoint at `/ws` accepts joystick commands from one operator
//! and streams telemetry to every connection; `/healthz` reports liveness.

pub mod protocol;
pub mod server;

pub use protocol::{decode_command, decode_server, encode_command, encode_server, ServerMessage, TeleopCommand};
pub use server::{spawn, Health, ServeError, ServerConfig, ServerHandle};
