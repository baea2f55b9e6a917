//! JSON messages exchanged over the teleoperation WebSocket.
//!
//! Every message is a UTF-8 JSON object carrying `"v": 1`. Clients send
//! [`TeleopCommand`]s; the server sends [`ServerMessage`]s tagged by `"type"`.
//! Unknown fields are ignored in both directions so either side can grow the
//! schema without breaking the other. The wire format is documented in
//! `docs/protocol.md`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("missing required field \"{0}\"")]
    MissingField(&'static str),
    #[error("unsupported protocol version {0}, expected {PROTOCOL_VERSION}")]
    UnsupportedVersion(u64),
    #[error("field \"{field}\": {reason}")]
    BadField { field: &'static str, reason: String },
}

/// Operator input: the commanded side velocities plus safety and terrain
/// controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeleopCommand {
    pub v: u64,
    /// Client clock in milliseconds since the Unix epoch. Must not decrease
    /// within a connection.
    pub t_client: f64,
    pub v_r_d: f64,
    pub v_l_d: f64,
    /// Built-in terrain to switch to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terrain_switch: Option<String>,
    /// Latches the emergency stop.
    #[serde(default)]
    pub estop: bool,
    /// Releases a latched emergency stop. Ignored when `estop` is also set.
    #[serde(default)]
    pub release: bool,
}

impl TeleopCommand {
    pub fn drive(t_client: f64, v_r_d: f64, v_l_d: f64) -> Self {
        Self { v: PROTOCOL_VERSION, t_client, v_r_d, v_l_d, terrain_switch: None, estop: false, release: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Snapshot of the running loop. Pairs are `[right, left]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub t_sim: f64,
    pub reference: [f64; 2],
    pub measured: [f64; 2],
    pub error: [f64; 2],
    pub control: [f64; 2],
    pub phi_hat: [f64; 2],
    pub slip: [f64; 2],
    pub pose: PoseFrame,
    pub terrain: String,
    pub estop: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Holds command authority.
    Operator,
    /// Receives telemetry only.
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    Malformed,
    NotAuthoritative,
    OutOfOrder,
    TooFast,
    UnknownTerrain,
    /// The simulation hit a numerical fault and stopped stepping.
    SimulationFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ServerMessage {
    Hello {
        v: u64,
        role: Role,
        terrains: Vec<String>,
        telemetry_hz: f64,
        max_speed: f64,
    },
    Telemetry {
        v: u64,
        #[serde(flatten)]
        frame: TelemetryFrame,
    },
    Error {
        v: u64,
        code: ErrorCode,
        message: String,
    },
}

impl ServerMessage {
    pub fn telemetry(frame: TelemetryFrame) -> Self {
        ServerMessage::Telemetry { v: PROTOCOL_VERSION, frame }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error { v: PROTOCOL_VERSION, code, message: message.into() }
    }
}

fn object(text: &str) -> Result<serde_json::Map<String, Value>, ProtocolError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ProtocolError::Malformed("expected a JSON object".into())),
        Err(e) => Err(ProtocolError::Malformed(e.to_string())),
    }
}

fn check_version(map: &serde_json::Map<String, Value>) -> Result<(), ProtocolError> {
    match map.get("v") {
        None => Err(ProtocolError::MissingField("v")),
        Some(v) => match v.as_u64() {
            Some(PROTOCOL_VERSION) => Ok(()),
            Some(other) => Err(ProtocolError::UnsupportedVersion(other)),
            None => Err(ProtocolError::BadField { field: "v", reason: "expected an integer".into() }),
        },
    }
}

pub fn decode_command(text: &str) -> Result<TeleopCommand, ProtocolError> {
    let map = object(text)?;
    check_version(&map)?;
    for field in ["t_client", "v_r_d", "v_l_d"] {
        match map.get(field) {
            None => return Err(ProtocolError::MissingField(field)),
            Some(x) if !x.as_f64().is_some_and(f64::is_finite) => {
                return Err(ProtocolError::BadField { field, reason: "expected a finite number".into() })
            }
            Some(_) => {}
        }
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn encode_command(cmd: &TeleopCommand) -> String {
    serde_json::to_string(cmd).expect("commands serialize")
}

pub fn decode_server(text: &str) -> Result<ServerMessage, ProtocolError> {
    let map = object(text)?;
    check_version(&map)?;
    if !map.contains_key("type") {
        return Err(ProtocolError::MissingField("type"));
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn encode_server(msg: &ServerMessage) -> String {
    serde_json::to_string(msg).expect("server messages serialize")
}
