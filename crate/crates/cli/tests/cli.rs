use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use tempfile::TempDir;

fn skidsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skidsim")).args(args).env_remove("SKIDSIM_LOG").output().unwrap()
}

fn scenario(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, format!("schema = \"skidsim.scenario.v1\"\n{body}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const STEP: &str = r#"id = "step"
duration = 6.0
terrain = "Gravel"
[profile]
kind = "step"
v_r = 0.5
v_l = 0.4
"#;

#[test]
fn run_writes_trace_meta_and_metrics_deterministically() {
    let tmp = TempDir::new().unwrap();
    let cfg = scenario(tmp.path(), "step.toml", STEP);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = skidsim(&["run", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["trace.csv", "meta.json", "metrics.json"] {
        let (x, y) = (std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{file} differs between identical runs");
    }
    let csv = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert!(csv.starts_with("t,v_r_d,v_l_d,v_r,v_l,e_r,e_l,u_r,u_l,phi_hat_r,phi_hat_l,phi_norm_r,phi_norm_l,s_r,s_l,x,y,theta\n"));
    assert_eq!(csv.lines().count(), 6002);

    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["scenario_id"], "step");
    assert_eq!(metrics["terrain"], "Gravel");
    assert!(metrics["step"]["settling_time"].as_f64().unwrap() < 1.0);
    assert!(metrics["tail_error"].as_f64().unwrap() < 0.05);
    assert_eq!(metrics["theoretical_rate"], 2.4);
}

#[test]
fn seed_flag_overrides_the_scenario_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = scenario(tmp.path(), "step.toml", STEP);
    let out = tmp.path().join("o");
    assert!(skidsim(&["run", "--config", s(&cfg), "--out", s(&out), "--seed", "41"]).status.success());
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 41);
}

#[test]
fn schema_violations_exit_2_with_the_offending_line() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        ("zero.toml", "id = \"x\"\n\nduration = 0.0\n", ":4:", "duration"),
        ("unknown.toml", "id = \"x\"\n[controller]\nkind = \"nnrmfc\"\nkapa = 1.0\n", ":5:", "kapa"),
        ("terrain.toml", "terrain = \"Lava\"\n", ":2:", "Lava"),
        ("syntax.toml", "id = \"x\"\nduration = = 3\n", ":3:", ""),
    ];
    for (name, body, line, mention) in cases {
        let cfg = scenario(tmp.path(), name, body);
        let out = tmp.path().join(format!("out-{name}"));
        let o = skidsim(&["run", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
        let err = stderr(&o);
        assert!(err.contains(&format!("{name}{line}")), "{name}: {err}");
        assert!(err.contains(mention), "{name}: {err}");
        assert!(!out.exists(), "{name}: output written for a rejected config");
    }
    let o = skidsim(&["run", "--config", s(&tmp.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn faulted_run_exits_1_and_keeps_its_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = scenario(tmp.path(), "fault.toml", "duration = 1.0\n[plant]\ng = [1e306, 1e306]\n");
    let out = tmp.path().join("o");
    let o = skidsim(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("faulted"));
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("meta.json")).unwrap()).unwrap();
    assert!(meta["fault"]["reason"].as_str().unwrap().contains("non-finite"));
}

#[test]
fn sweep_tables_do_not_depend_on_job_count() {
    let tmp = TempDir::new().unwrap();
    let cfg = scenario(tmp.path(), "step.toml", STEP);
    let mut outputs = Vec::new();
    for jobs in ["1", "3"] {
        let out = tmp.path().join(format!("j{jobs}"));
        let o = skidsim(&[
            "sweep", "--config", s(&cfg), "--out", s(&out), "--seeds", "3", "--jobs", jobs, "--terrains", "Dry asphalt,Ice",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push((std::fs::read(out.join("runs.csv")).unwrap(), std::fs::read(out.join("aggregate.csv")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let runs = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(runs.lines().count(), 7);
    assert!(runs.lines().nth(1).unwrap().starts_with("Dry asphalt,0,"));
    assert!(runs.lines().nth(6).unwrap().starts_with("Ice,2,"));
}

#[test]
fn sweep_json_and_envelope_window() {
    let tmp = TempDir::new().unwrap();
    let cfg = scenario(tmp.path(), "cp.toml", "duration = 12.0\ninitial_velocity = [0.3, 0.3]\n");
    let out = tmp.path().join("o");
    let o = skidsim(&[
        "sweep", "--config", s(&cfg), "--out", s(&out), "--seeds", "2", "--terrains", "Mud", "--format", "json",
        "--envelope-window", "0,10", "--keep-traces",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let agg: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg[0]["terrain"], "Mud");
    assert!(agg[0]["min_alpha"].as_f64().unwrap() > 0.0);
    assert!(out.join("traces/scenario-mud-0/trace.csv").is_file());
    assert!(out.join("traces/scenario-mud-1/meta.json").is_file());

    let o = skidsim(&["sweep", "--config", s(&cfg), "--out", s(&out), "--terrains", "Lava"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_reports_both_controllers_on_shared_seeds() {
    let tmp = TempDir::new().unwrap();
    let cfg = scenario(tmp.path(), "ice.toml", "duration = 8.0\nterrain = \"Ice\"\n[profile]\nkind = \"step\"\n");
    let out = tmp.path().join("o");
    let o = skidsim(&["compare", "--config", s(&cfg), "--out", s(&out), "--seeds", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([0, 1, 2]));
    assert_eq!(report["controllers"][0]["controller"], "nnrmfc");
    assert_eq!(report["controllers"][1]["controller"], "pid");
    assert_eq!(report["deltas"][0]["seeds"], 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("nnrmfc vs pid"));

    let o = skidsim(&["compare", "--config", s(&cfg), "--out", s(&out), "--seeds", "2", "--format", "csv"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "controller,seed,settling_time,overshoot,steady_state_error");
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn tune_protocol_gates_on_config_and_reports_rounds() {
    let tmp = TempDir::new().unwrap();
    let bad = scenario(tmp.path(), "gamma.toml", "[controller]\nkind = \"nnrmfc\"\ngamma = 0.0\n");
    let out = tmp.path().join("bad");
    let o = skidsim(&["tune-protocol", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma.toml:4:"), "{}", stderr(&o));
    assert!(!out.exists());

    let good = scenario(tmp.path(), "good.toml", "duration = 40.0\nseed = 2\n");
    let out = tmp.path().join("good");
    let o = skidsim(&["tune-protocol", "--config", s(&good), "--out", s(&out), "--format", "csv"]);
    assert!(o.status.success(), "{}\n{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    let csv = std::fs::read_to_string(out.join("tune_report.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",pass,")).count(), 4, "{csv}");
    assert!(csv.contains("symmetry error mean |V_R + V_L|"));
}

#[test]
fn plot_renders_five_figures_per_trace_and_an_overlay() {
    let tmp = TempDir::new().unwrap();
    let cfg = scenario(tmp.path(), "step.toml", STEP);
    let sweep = tmp.path().join("sweep");
    let o = skidsim(&["sweep", "--config", s(&cfg), "--out", s(&sweep), "--seeds", "1", "--terrains", "Ice,Mud", "--keep-traces"]);
    assert!(o.status.success());

    let one = tmp.path().join("one");
    let o = skidsim(&["plot", s(&sweep.join("traces/step-ice-0")), "--out", s(&one)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> =
        std::fs::read_dir(&one).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(
        names,
        ["step-ice-0_control.svg", "step-ice-0_error.svg", "step-ice-0_path.svg", "step-ice-0_phi_norm.svg", "step-ice-0_velocity.svg"]
    );
    let svg = std::fs::read_to_string(one.join("step-ice-0_velocity.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("Velocity tracking"));

    let all = tmp.path().join("all");
    assert!(skidsim(&["plot", s(&sweep), "--out", s(&all)]).status.success());
    assert_eq!(std::fs::read_dir(&all).unwrap().count(), 11);
    let overlay = std::fs::read_to_string(all.join("error_by_terrain.svg")).unwrap();
    assert!(overlay.contains("Ice (1 run)") && overlay.contains("Mud (1 run)"));
}

#[test]
fn plot_rejects_bad_traces_without_writing_anything() {
    let tmp = TempDir::new().unwrap();
    let header = "t,v_r_d,v_l_d,v_r,v_l,e_r,e_l,u_r,u_l,phi_hat_r,phi_hat_l,phi_norm_r,phi_norm_l,s_r,s_l,x,y,theta\n";
    let empty = tmp.path().join("empty.csv");
    std::fs::write(&empty, header).unwrap();
    let good = tmp.path().join("good.csv");
    std::fs::write(&good, format!("{header}0,0.5,0.5,0,0,-0.5,-0.5,1,1,0.1,0.1,0.5,0.5,0.1,0.1,0,0,0\n")).unwrap();
    let out = tmp.path().join("plots");

    let o = skidsim(&["plot", s(&good), s(&empty), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no records"), "{}", stderr(&o));
    assert!(!out.exists());

    let partial = tmp.path().join("partial.csv");
    std::fs::write(&partial, "t,v_r_d,v_l_d\n0,0,0\n").unwrap();
    let o = skidsim(&["plot", s(&partial), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("missing column") && err.contains(header.trim_end()), "{err}");
    assert!(!out.exists());
}

#[test]
fn log_verbosity_follows_the_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = scenario(tmp.path(), "step.toml", STEP);
    let out = tmp.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_skidsim"))
        .args(["run", "--config", s(&cfg), "--out", s(&out)])
        .env("SKIDSIM_LOG", "info")
        .output()
        .unwrap();
    assert!(stderr(&o).contains("loaded scenario `step`"));
    assert!(!stderr(&skidsim(&["run", "--config", s(&cfg), "--out", s(&out)])).contains("loaded scenario"));
}

#[test]
fn serve_answers_health_checks() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_skidsim"))
        .args(["serve", "--addr", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.split("ws://").nth(1).and_then(|r| r.split('/').next()).expect("no address printed").to_string();
    std::thread::sleep(std::time::Duration::from_millis(300));

    let mut stream = TcpStream::connect(&addr).unwrap();
    stream.write_all(b"GET /healthz HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();

    let body: serde_json::Value = serde_json::from_str(&raw[raw.find("\r\n\r\n").unwrap() + 4..]).unwrap();
    assert_eq!(body["status"], "ok");
    assert_eq!(body["connections"], 0);
    assert!(body["t_sim"].as_f64().unwrap() > 0.1);
}
