//! Wall-clock-paced simulation service.
//!
//! One task owns the [`Simulator`] and the teleoperation reference stream.
//! Connection handlers never touch either: they forward validated commands
//! over a queue and relay pre-encoded telemetry from a broadcast channel.
//! The first connection holds command authority; later ones observe. When
//! the operator disconnects, the next new connection becomes the operator.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::Serialize;
use skidsim_core::config::{ConfigError, ScenarioConfig};
use skidsim_core::dynamics::TerrainModel;
use skidsim_core::engine::Simulator;
use skidsim_core::reference::TeleopReference;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, watch};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::protocol::{
    decode_command, encode_server, ErrorCode, PoseFrame, Role, ServerMessage, TelemetryFrame, TeleopCommand,
    PROTOCOL_VERSION,
};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Plant, terrain, controller and teleop settings. The profile and
    /// duration are ignored: the reference comes from the operator and the
    /// loop runs until shutdown.
    pub scenario: ScenarioConfig,
    pub telemetry_hz: f64,
}

impl ServerConfig {
    pub fn new(scenario: ScenarioConfig) -> Self {
        Self { scenario, telemetry_hz: 20.0 }
    }
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("telemetry rate {0} Hz must be positive and at most the controller rate")]
    TelemetryRate(f64),
    #[error("network: {0}")]
    Io(#[from] std::io::Error),
}

enum SimInput {
    Command { cmd: TeleopCommand },
    OperatorLeft,
}

/// Counters shared between the loop, the handlers and `/healthz`.
struct Shared {
    t_sim_bits: AtomicU64,
    faulted: AtomicBool,
    connections: AtomicUsize,
    malformed: AtomicU64,
    rejected: AtomicU64,
    next_id: AtomicU64,
    authority: Mutex<Option<u64>>,
    max_speed: f64,
    telemetry_hz: f64,
}

#[derive(Clone)]
struct AppState {
    shared: Arc<Shared>,
    inputs: mpsc::Sender<SimInput>,
    telemetry: broadcast::Sender<Arc<str>>,
}

/// Body of `GET /healthz`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Health {
    pub status: String,
    pub t_sim: f64,
    pub connections: usize,
    pub operator_connected: bool,
    pub malformed_messages: u64,
    pub rejected_commands: u64,
}

/// A running server.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    http: JoinHandle<()>,
    sim: JoinHandle<()>,
}

impl ServerHandle {
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        let _ = self.http.await;
        let _ = self.sim.await;
    }

    /// Waits until the server stops on its own (it only does on shutdown).
    pub async fn join(self) {
        let _ = self.http.await;
        let _ = self.sim.await;
    }

    pub fn shutdown_sender(&self) -> watch::Sender<bool> {
        self.shutdown.clone()
    }
}

/// Binds `addr` and starts the loop and the HTTP/WebSocket service.
pub async fn spawn(cfg: ServerConfig, addr: SocketAddr) -> Result<ServerHandle, ServeError> {
    let sim = Simulator::new(&cfg.scenario)?;
    let rate = cfg.scenario.controller_rate_hz;
    if !(cfg.telemetry_hz > 0.0 && cfg.telemetry_hz <= rate) {
        return Err(ServeError::TelemetryRate(cfg.telemetry_hz));
    }
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;

    let shared = Arc::new(Shared {
        t_sim_bits: AtomicU64::new(0f64.to_bits()),
        faulted: AtomicBool::new(false),
        connections: AtomicUsize::new(0),
        malformed: AtomicU64::new(0),
        rejected: AtomicU64::new(0),
        next_id: AtomicU64::new(0),
        authority: Mutex::new(None),
        max_speed: cfg.scenario.teleop.max_speed,
        telemetry_hz: cfg.telemetry_hz,
    });
    let (input_tx, input_rx) = mpsc::channel(256);
    let (telemetry_tx, _) = broadcast::channel(64);
    let (shutdown_tx, shutdown_rx) = watch::channel(false);

    let every = (rate / cfg.telemetry_hz).round().max(1.0) as u64;
    let reference = TeleopReference::new(cfg.scenario.teleop);
    let sim_task = tokio::spawn(sim_loop(
        sim,
        reference,
        input_rx,
        telemetry_tx.clone(),
        shared.clone(),
        shutdown_rx.clone(),
        every,
    ));

    let state = AppState { shared, inputs: input_tx, telemetry: telemetry_tx };
    let app = Router::new().route("/ws", get(ws_upgrade)).route("/healthz", get(healthz)).with_state(state);
    let mut stop = shutdown_rx;
    let http = tokio::spawn(async move {
        let served = axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = stop.wait_for(|s| *s).await;
            })
            .await;
        if let Err(e) = served {
            log::error!("teleop server stopped: {e}");
        }
    });
    log::info!("teleop server listening on {addr}");
    Ok(ServerHandle { addr, shutdown: shutdown_tx, http, sim: sim_task })
}

fn frame_of(sim: &Simulator, rec: &skidsim_core::trace::TraceRecord, reference: &TeleopReference, stale: bool) -> TelemetryFrame {
    let mut warnings: Vec<String> = sim.warnings().iter().map(|w| w.message.clone()).collect();
    if reference.estopped() {
        warnings.push("estop latched".into());
    }
    if stale {
        warnings.push("watchdog: no operator command".into());
    }
    TelemetryFrame {
        t_sim: rec.t,
        reference: rec.reference,
        measured: rec.velocity,
        error: rec.error,
        control: rec.control,
        phi_hat: rec.phi_hat,
        slip: rec.slip,
        pose: PoseFrame { x: rec.pose[0], y: rec.pose[1], theta: rec.pose[2] },
        terrain: sim.terrain().name.clone(),
        estop: reference.estopped(),
        warnings,
    }
}

async fn sim_loop(
    mut sim: Simulator,
    mut reference: TeleopReference,
    mut inputs: mpsc::Receiver<SimInput>,
    telemetry: broadcast::Sender<Arc<str>>,
    shared: Arc<Shared>,
    mut shutdown: watch::Receiver<bool>,
    every: u64,
) {
    let period = sim.period();
    let watchdog = reference.config().watchdog_timeout;
    let mut anchor = Instant::now();
    let mut anchor_tick = 0u64;
    let mut tick = 0u64;
    let mut last_command: Option<f64> = None;
    let mut wake = tokio::time::interval(Duration::from_millis(2));
    wake.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);

    loop {
        tokio::select! {
            _ = wake.tick() => {}
            _ = shutdown.changed() => break,
        }
        while let Ok(input) = inputs.try_recv() {
            let now = sim.time();
            match input {
                SimInput::Command { cmd } => {
                    if cmd.release && !cmd.estop {
                        reference.release();
                    }
                    match reference.push(cmd.t_client, [cmd.v_r_d, cmd.v_l_d], now) {
                        Ok(()) => last_command = Some(now),
                        Err(e) => log::debug!("command dropped: {e}"),
                    }
                    // Latching after the push clears the held command, so a
                    // later release waits for fresh operator input.
                    if cmd.estop {
                        log::warn!("t = {now:.2}: emergency stop latched");
                        reference.estop();
                    }
                    if let Some(name) = &cmd.terrain_switch {
                        if let Some(t) = TerrainModel::builtin(name) {
                            log::info!("t = {now:.2}: terrain switched to {}", t.name);
                            sim.set_terrain(t);
                        }
                    }
                }
                SimInput::OperatorLeft => reference.reset_stream(),
            }
        }

        let due = anchor_tick + (anchor.elapsed().as_secs_f64() / period) as u64;
        if due.saturating_sub(tick) as f64 * period > 1.0 {
            // Fell more than a second behind (e.g. the host was suspended):
            // resume from now instead of fast-forwarding.
            log::warn!("simulation fell behind wall clock; re-anchoring");
            anchor = Instant::now();
            anchor_tick = tick;
            continue;
        }
        if shared.faulted.load(Ordering::Relaxed) {
            continue;
        }
        while tick < due {
            let now = sim.time();
            let sample = reference.sample(now, period);
            let step = sim.control(&sample).and_then(|rec| sim.advance().map(|_| rec));
            match step {
                Ok(rec) => {
                    if tick % every == 0 {
                        let stale = last_command.is_none_or(|t| now - t > watchdog);
                        let msg = ServerMessage::telemetry(frame_of(&sim, &rec, &reference, stale));
                        let _ = telemetry.send(Arc::from(encode_server(&msg)));
                    }
                }
                Err(e) => {
                    log::error!("simulation fault at t = {now:.3}: {e}; stepping halted");
                    shared.faulted.store(true, Ordering::Relaxed);
                    let msg = ServerMessage::error(ErrorCode::SimulationFault, format!("t = {now}: {e}"));
                    let _ = telemetry.send(Arc::from(encode_server(&msg)));
                    break;
                }
            }
            tick += 1;
            shared.t_sim_bits.store(sim.time().to_bits(), Ordering::Relaxed);
        }
    }
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    let s = &state.shared;
    Json(Health {
        status: if s.faulted.load(Ordering::Relaxed) { "faulted" } else { "ok" }.into(),
        t_sim: f64::from_bits(s.t_sim_bits.load(Ordering::Relaxed)),
        connections: s.connections.load(Ordering::Relaxed),
        operator_connected: s.authority.lock().expect("authority lock").is_some(),
        malformed_messages: s.malformed.load(Ordering::Relaxed),
        rejected_commands: s.rejected.load(Ordering::Relaxed),
    })
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, state))
}

/// Checks an operator command; `Err` carries the error frame to send back.
fn vet(cmd: &TeleopCommand, last_stamp: Option<f64>, max_speed: f64) -> Result<(), ServerMessage> {
    if let Some(last) = last_stamp {
        if cmd.t_client < last {
            return Err(ServerMessage::error(
                ErrorCode::OutOfOrder,
                format!("t_client {} precedes the previous command's {last}", cmd.t_client),
            ));
        }
    }
    for (name, v) in [("v_r_d", cmd.v_r_d), ("v_l_d", cmd.v_l_d)] {
        if v.abs() > max_speed {
            return Err(ServerMessage::error(ErrorCode::TooFast, format!("{name} = {v} exceeds {max_speed} m/s")));
        }
    }
    if let Some(name) = &cmd.terrain_switch {
        if TerrainModel::builtin(name).is_none() {
            return Err(ServerMessage::error(
                ErrorCode::UnknownTerrain,
                format!("unknown terrain \"{name}\"; built-in: {}", TerrainModel::builtin_names().join(", ")),
            ));
        }
    }
    Ok(())
}

async fn connection(socket: WebSocket, state: AppState) {
    let shared = &state.shared;
    let id = shared.next_id.fetch_add(1, Ordering::Relaxed);
    shared.connections.fetch_add(1, Ordering::Relaxed);
    let operator = {
        let mut holder = shared.authority.lock().expect("authority lock");
        let free = holder.is_none();
        if free {
            *holder = Some(id);
        }
        free
    };
    log::info!("connection {id} opened as {}", if operator { "operator" } else { "observer" });

    let (mut sink, mut stream) = socket.split();
    let mut telemetry = state.telemetry.subscribe();
    let hello = ServerMessage::Hello {
        v: PROTOCOL_VERSION,
        role: if operator { Role::Operator } else { Role::Observer },
        terrains: TerrainModel::builtin_names().into_iter().map(String::from).collect(),
        telemetry_hz: shared.telemetry_hz,
        max_speed: shared.max_speed,
    };
    let mut last_stamp = None;
    if sink.send(Message::Text(encode_server(&hello).into())).await.is_ok() {
        loop {
            tokio::select! {
                frame = telemetry.recv() => match frame {
                    Ok(text) => {
                        if sink.send(Message::Text(text.as_ref().into())).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => log::debug!("connection {id} skipped {n} frames"),
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                incoming = stream.next() => {
                    let text = match incoming {
                        Some(Ok(Message::Text(text))) => text,
                        Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                        Some(Ok(_)) => continue,
                    };
                    let reply = match decode_command(text.as_str()) {
                        Err(e) => {
                            shared.malformed.fetch_add(1, Ordering::Relaxed);
                            Some(ServerMessage::error(ErrorCode::Malformed, e.to_string()))
                        }
                        Ok(_) if !operator => {
                            shared.rejected.fetch_add(1, Ordering::Relaxed);
                            Some(ServerMessage::error(ErrorCode::NotAuthoritative, "this connection is an observer"))
                        }
                        Ok(cmd) => match vet(&cmd, last_stamp, shared.max_speed) {
                            Err(reply) => {
                                shared.rejected.fetch_add(1, Ordering::Relaxed);
                                Some(reply)
                            }
                            Ok(()) => {
                                last_stamp = Some(cmd.t_client);
                                if state.inputs.send(SimInput::Command { cmd }).await.is_err() {
                                    break;
                                }
                                None
                            }
                        },
                    };
                    if let Some(reply) = reply {
                        if sink.send(Message::Text(encode_server(&reply).into())).await.is_err() {
                            break;
                        }
                    }
                }
            }
        }
    }

    shared.connections.fetch_sub(1, Ordering::Relaxed);
    if operator {
        *shared.authority.lock().expect("authority lock") = None;
        let _ = state.inputs.send(SimInput::OperatorLeft).await;
    }
    log::info!("connection {id} closed");
}
