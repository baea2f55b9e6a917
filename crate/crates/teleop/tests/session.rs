use std::net::SocketAddr;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use skidsim_core::config::ScenarioConfig;
use skidsim_teleop::protocol::{decode_server, encode_command, ErrorCode, Role, TelemetryFrame};
use skidsim_teleop::{spawn, Health, ServerConfig, ServerHandle, ServerMessage, TeleopCommand};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Socket = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start() -> ServerHandle {
    let addr: SocketAddr = "127.0.0.1:0".parse().unwrap();
    spawn(ServerConfig::new(ScenarioConfig::default()), addr).await.unwrap()
}

async fn connect(addr: SocketAddr) -> (Socket, Role) {
    let (mut ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
    match next_message(&mut ws).await {
        ServerMessage::Hello { v, role, terrains, telemetry_hz, max_speed } => {
            assert_eq!(v, 1);
            assert_eq!(terrains.len(), 5);
            assert!(terrains.iter().any(|t| t == "Ice"));
            assert_eq!(telemetry_hz, 20.0);
            assert_eq!(max_speed, 1.5);
            (ws, role)
        }
        other => panic!("expected hello, got {other:?}"),
    }
}

async fn next_message(ws: &mut Socket) -> ServerMessage {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next())
            .await
            .expect("server went silent")
            .expect("socket closed")
            .unwrap();
        if let Message::Text(text) = msg {
            return decode_server(text.as_str()).unwrap();
        }
    }
}

async fn next_telemetry(ws: &mut Socket) -> TelemetryFrame {
    loop {
        match next_message(ws).await {
            ServerMessage::Telemetry { v, frame } => {
                assert_eq!(v, 1);
                return frame;
            }
            ServerMessage::Error { code, message, .. } => panic!("unexpected error {code:?}: {message}"),
            ServerMessage::Hello { .. } => panic!("second hello"),
        }
    }
}

async fn next_error(ws: &mut Socket) -> (ErrorCode, String) {
    loop {
        if let ServerMessage::Error { v, code, message } = next_message(ws).await {
            assert_eq!(v, 1);
            return (code, message);
        }
    }
}

async fn send(ws: &mut Socket, cmd: &TeleopCommand) {
    ws.send(Message::text(encode_command(cmd))).await.unwrap();
}

async fn health(addr: SocketAddr) -> Health {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    stream.write_all(b"GET /healthz HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).await.unwrap();
    assert!(raw.starts_with("HTTP/1.1 200"), "{raw}");
    let body = &raw[raw.find("\r\n\r\n").unwrap() + 4..];
    serde_json::from_str(body).unwrap()
}

fn wall_ms() -> f64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap().as_secs_f64() * 1e3
}

/// Streams `cmd` at 20 Hz for `secs` seconds, returning the telemetry seen.
async fn drive_for(ws: &mut Socket, v: [f64; 2], secs: f64) -> Vec<TelemetryFrame> {
    let end = Instant::now() + Duration::from_secs_f64(secs);
    let mut frames = Vec::new();
    let mut ticker = tokio::time::interval(Duration::from_millis(50));
    while Instant::now() < end {
        tokio::select! {
            _ = ticker.tick() => send(ws, &TeleopCommand::drive(wall_ms(), v[0], v[1])).await,
            msg = next_message(ws) => match msg {
                ServerMessage::Telemetry { frame, .. } => frames.push(frame),
                other => panic!("unexpected {other:?}"),
            },
        }
    }
    frames
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_operator_session() {
    let server = start().await;
    let addr = server.addr;
    let (mut op, role) = connect(addr).await;
    assert_eq!(role, Role::Operator);
    let (mut watcher, role) = connect(addr).await;
    assert_eq!(role, Role::Observer);

    let first = next_telemetry(&mut watcher).await;
    assert_eq!(first.terrain, "Dry asphalt");
    assert!(!first.estop);
    assert_eq!(first.reference, [0.0, 0.0]);
    assert_eq!(first.measured, [0.0, 0.0]);
    assert!(first.warnings.iter().any(|w| w.starts_with("watchdog")), "{:?}", first.warnings);

    // Drive straight: the measured velocity follows the slew-limited command.
    let frames = drive_for(&mut op, [0.5, 0.5], 2.0).await;
    assert!(frames.len() >= 30, "only {} frames in 2 s", frames.len());
    for pair in frames.windows(2) {
        let gap = pair[1].t_sim - pair[0].t_sim;
        assert!((gap - 0.05).abs() < 1e-9 || gap > 0.05, "telemetry gap {gap}");
    }
    let last = frames.last().unwrap();
    assert_eq!(last.reference, [0.5, 0.5]);
    for i in 0..2 {
        assert!((last.measured[i] - 0.5).abs() < 0.05, "{last:?}");
        assert!((last.error[i] - (last.measured[i] - last.reference[i])).abs() < 1e-12);
        assert!(last.slip[i].abs() < 1.0);
        assert!(last.phi_hat[i].is_finite() && last.control[i].is_finite());
    }
    assert!(last.pose.x > 0.3 && last.pose.y.abs() < 0.1, "{:?}", last.pose);
    assert!(!last.warnings.iter().any(|w| w.starts_with("watchdog")));

    // Observers cannot command; malformed input is counted and answered.
    send(&mut watcher, &TeleopCommand::drive(wall_ms(), 0.0, 0.0)).await;
    assert_eq!(next_error(&mut watcher).await.0, ErrorCode::NotAuthoritative);
    watcher.send(Message::text("{\"v\":1,\"v_r_d\":0.1}")).await.unwrap();
    let (code, message) = next_error(&mut watcher).await;
    assert_eq!(code, ErrorCode::Malformed);
    assert!(message.contains("t_client"), "{message}");
    op.send(Message::text("not json")).await.unwrap();
    assert_eq!(next_error(&mut op).await.0, ErrorCode::Malformed);

    // Commands that break the contract are refused without touching the loop.
    send(&mut op, &TeleopCommand::drive(wall_ms(), 3.0, 0.5)).await;
    assert_eq!(next_error(&mut op).await.0, ErrorCode::TooFast);
    send(&mut op, &TeleopCommand::drive(1.0, 0.5, 0.5)).await;
    assert_eq!(next_error(&mut op).await.0, ErrorCode::OutOfOrder);
    let bogus = TeleopCommand { terrain_switch: Some("Lava".into()), ..TeleopCommand::drive(wall_ms(), 0.5, 0.5) };
    send(&mut op, &bogus).await;
    let (code, message) = next_error(&mut op).await;
    assert_eq!(code, ErrorCode::UnknownTerrain);
    assert!(message.contains("Ice"), "{message}");

    let h = health(addr).await;
    assert_eq!(h.status, "ok");
    assert_eq!(h.connections, 2);
    assert!(h.operator_connected);
    assert_eq!(h.malformed_messages, 2);
    assert_eq!(h.rejected_commands, 4);
    assert!(h.t_sim > 1.5);

    // Terrain switch takes effect in the running loop.
    let ice = TeleopCommand { terrain_switch: Some("Ice".into()), ..TeleopCommand::drive(wall_ms(), 0.5, 0.5) };
    send(&mut op, &ice).await;
    let frames = drive_for(&mut op, [0.5, 0.5], 0.5).await;
    assert_eq!(frames.last().unwrap().terrain, "Ice");

    // Emergency stop latches: the reference drops to rest and stays there
    // while drive commands keep arriving.
    let stop = TeleopCommand { estop: true, ..TeleopCommand::drive(wall_ms(), 0.5, 0.5) };
    send(&mut op, &stop).await;
    let frames = drive_for(&mut op, [0.5, 0.5], 1.0).await;
    let latched: Vec<_> = frames.iter().filter(|f| f.estop).collect();
    assert!(latched.len() >= 15);
    assert!(latched.iter().all(|f| f.reference == [0.0, 0.0]));
    assert!(latched[0].warnings.iter().any(|w| w == "estop latched"));
    assert!(latched.last().unwrap().measured.iter().all(|v| v.abs() < 0.1));

    let go = TeleopCommand { release: true, ..TeleopCommand::drive(wall_ms(), 0.3, 0.3) };
    send(&mut op, &go).await;
    let frames = drive_for(&mut op, [0.3, 0.3], 1.0).await;
    let last = frames.last().unwrap();
    assert!(!last.estop);
    assert_eq!(last.reference, [0.3, 0.3]);

    // Authority passes to the next connection once the operator leaves.
    op.close(None).await.unwrap();
    drop(op);
    tokio::time::sleep(Duration::from_millis(200)).await;
    let h = health(addr).await;
    assert!(!h.operator_connected);
    assert_eq!(h.connections, 1);
    let (mut next, role) = connect(addr).await;
    assert_eq!(role, Role::Operator);
    send(&mut next, &TeleopCommand::drive(wall_ms(), 0.2, 0.2)).await;
    drive_for(&mut next, [0.2, 0.2], 0.3).await;

    server.shutdown().await;
}

/// Drives, then either goes silent or hangs up, and checks the reference
/// ramps to rest within the watchdog budget as seen by `watch`.
async fn assert_returns_to_rest(disconnect: bool) {
    let server = start().await;
    let (mut op, _) = connect(server.addr).await;
    let (mut watcher, _) = connect(server.addr).await;
    let frames = drive_for(&mut op, [0.6, 0.4], 1.0).await;
    let last_command = frames.last().unwrap().t_sim;
    assert_eq!(frames.last().unwrap().reference, [0.6, 0.4]);
    if disconnect {
        drop(op);
    } else {
        tokio::spawn(async move {
            // Keep the socket open and drained, but send nothing.
            while op.next().await.is_some() {}
        });
    }

    let mut seen = Vec::new();
    while seen.last().is_none_or(|f: &TelemetryFrame| f.t_sim < last_command + 2.0) {
        let frame = next_telemetry(&mut watcher).await;
        if frame.t_sim > last_command {
            seen.push(frame);
        }
    }
    // Mid-ramp the reference is 0.6·(1 − (t − rx − 0.5)), which pins down the
    // sim time rx at which the server took the final command.
    let mid = seen.iter().find(|f| f.reference[0] > 0.1 && f.reference[0] < 0.5).expect("no ramp frame");
    let rx = mid.t_sim - 0.5 - (1.0 - mid.reference[0] / 0.6);
    assert!(rx > last_command - 0.05 - 1e-9 && rx < last_command + 0.2, "rx {rx} vs last frame {last_command}");
    let at_rest = seen.iter().find(|f| f.reference == [0.0, 0.0]).expect("never reached rest");
    // Telemetry is sampled every 50 ms, so rest shows up at most one frame late.
    assert!(at_rest.t_sim - rx <= 1.5 + 0.05 + 1e-9, "rest after {} s", at_rest.t_sim - rx);
    assert!(seen.iter().filter(|f| f.t_sim > rx + 0.55).all(|f| f.warnings.iter().any(|w| w.starts_with("watchdog"))));
    for pair in seen.windows(2) {
        assert!(pair[1].reference[0] <= pair[0].reference[0] + 1e-12);
    }
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn watchdog_stops_a_silent_operator() {
    assert_returns_to_rest(false).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn watchdog_stops_after_operator_disconnects_mid_motion() {
    assert_returns_to_rest(true).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn simulation_time_tracks_wall_clock() {
    let server = start().await;
    let (mut watcher, _) = connect(server.addr).await;
    let start = next_telemetry(&mut watcher).await;
    let wall = Instant::now();
    let mut last = start.clone();
    while wall.elapsed() < Duration::from_secs(10) {
        last = next_telemetry(&mut watcher).await;
    }
    let sim = last.t_sim - start.t_sim;
    let real = wall.elapsed().as_secs_f64();
    let drift = (sim - real).abs() / real;
    assert!(drift < 0.02, "sim {sim:.3} s vs wall {real:.3} s ({:.2}% drift)", drift * 100.0);
    server.shutdown().await;
}
