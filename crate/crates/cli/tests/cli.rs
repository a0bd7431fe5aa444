use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use uail_cli::{bridge, connect, Manifest};
use uail_core::collect::Agent;
use uail_core::config::{self, sha256_hex};
use uail_core::dataset::{Dataset, Strategy};
use uail_core::experiment::{ExperimentConfig, ReferenceWorld};
use uail_core::policy;
use uail_core::rng::{derive_seed, Stream};
use uail_core::teleop::{banner_intervals, link_pair, run_scripted_client, run_session, switched_intervals, ControlInput, FrameUpdate, SessionParams, Transcript};

fn uail(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uail")).args(args).output().expect("spawn uail")
}

fn run_ok(args: &[&str]) -> serde_json::Value {
    let out = uail(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json summary")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_configuration_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = uail(&["gen-tracks", "--set", "world.no_such_key=1", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = uail(&["collect", "--strategy", "uail", "--budget", "10", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2), "uail without a policy");
    let out = uail(&["collect", "--strategy", "bc", "--eta", "soon", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[mc]\nn_sample = 3\n").unwrap();
    let out = uail(&["gen-tracks", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_directory_manifest_lists_every_file() {
    let tmp = tempfile::tempdir().unwrap();
    let v = run_ok(&["gen-tracks", "--out", s(tmp.path())]);
    let dir = Path::new(v["run_dir"].as_str().unwrap());
    let name = dir.file_name().unwrap().to_str().unwrap();
    let digest = v["config_digest"].as_str().unwrap();
    assert!(name.starts_with(&digest[..12]), "{name}");
    let m: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.command, "gen-tracks");
    assert!(m.files.windows(2).all(|w| w[0].path < w[1].path));
    assert!(m.files.iter().any(|f| f.path == "config.toml"));
    for f in &m.files {
        let bytes = std::fs::read(dir.join(&f.path)).unwrap();
        assert_eq!(sha256_hex(&bytes), f.sha256);
        assert_eq!(bytes.len() as u64, f.bytes);
    }
    // the saved config reproduces the digest
    let cfg = config::load(&dir.join("config.toml")).unwrap();
    assert_eq!(config::digest(&cfg), digest);
}

#[test]
fn collect_replay_export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    run_ok(&["collect", "--strategy", "noise", "--budget", "300", "--run-dir", s(&d.join("c"))]);
    let data = d.join("c/dataset.jsonl");
    let v = run_ok(&["replay", "--data", s(&data), "--run-dir", s(&d.join("r"))]);
    assert_eq!(v["certified"], true);
    run_ok(&["export", "--data", s(&data), "--run-dir", s(&d.join("e"))]);
    let csv = std::fs::read_to_string(d.join("e/frames.csv")).unwrap();
    assert_eq!(csv.lines().count(), 301);

    let mut ds = Dataset::load(&data).unwrap();
    ds.trajectories[0].frames[1].action.throttle = 0.0;
    ds.save(&d.join("bad.jsonl")).unwrap();
    let out = uail(&["replay", "--data", s(&d.join("bad.jsonl")), "--run-dir", s(&d.join("r2"))]);
    assert_eq!(out.status.code(), Some(1));
}

/// Deterministic stand-in for a human: gentle steering that depends only on
/// what the frame update shows.
fn client_input(tick: u64, f: Option<&FrameUpdate>) -> ControlInput {
    let steer = f.map_or(0.0, |f| (0.15 * (f.pose.heading * 3.0).sin()).clamp(-1.0, 1.0));
    ControlInput { client_tick: tick, steer, throttle: 0.45, takeover: false }
}

#[test]
fn websocket_session_matches_the_in_memory_session() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    run_ok(&["train", "--seed", "0", "--run-dir", s(&d.join("t"))]);
    let policy_path = d.join("t/policy.bin");

    let mut child = Command::new(env!("CARGO_BIN_EXE_uail"))
        .args(["serve", "--strategy", "uail", "--policy", s(&policy_path), "--eta", "0.02", "--budget", "250"])
        .args(["--seed", "4", "--tick-hz", "0", "--listen", "127.0.0.1:0", "--run-dir", s(&d.join("serve"))])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut err = BufReader::new(child.stderr.take().unwrap());
    let addr = loop {
        let mut line = String::new();
        assert!(err.read_line(&mut line).unwrap() > 0, "serve exited before listening");
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) {
            if v["event"] == "listening" {
                break v["addr"].as_str().unwrap().to_string();
            }
        }
    };
    let (link, io) = bridge(connect(&addr).unwrap()).unwrap();
    let got = run_scripted_client(link, "session", None, client_input).unwrap();
    drop(io);
    assert!(child.wait().unwrap().success());
    assert!(!got.is_empty());
    let served = std::fs::read(d.join("serve/dataset.jsonl")).unwrap();
    let transcript = Transcript::load(&d.join("serve/transcript.log")).unwrap();

    // same session in process
    let cfg = config::apply_overrides(&ExperimentConfig::default(), &["collect.eta.global=0.02".into()]).unwrap();
    let digest = config::digest(&cfg);
    let world = ReferenceWorld::build(&cfg.world).unwrap();
    let p = policy::load(&policy_path).unwrap();
    let agent = cfg.mc_agent(p, derive_seed(4, Stream::Dropout, &[]));
    let mut job = cfg.job(Strategy::Uail, &world.seen, 250, 4, &digest);
    job.uncertainty = Some(agent.uncertainty_settings());
    let (server, client) = link_pair();
    let params = SessionParams { session: "session".into(), tick_hz: 0.0, tick_timeout: Duration::from_millis(200), ..SessionParams::default() };
    let h = std::thread::spawn(move || run_scripted_client(client, "session", None, client_input).unwrap());
    let out = run_session(job, Some(&agent as &dyn Agent), server, &params).unwrap();
    h.join().unwrap();

    assert_eq!(out.dataset.to_bytes(), served, "datasets differ between transports");
    let ds = Dataset::read_from(&served[..]).unwrap();
    assert_eq!(ds.n_frames(), 250);
    let switched = switched_intervals(&ds);
    assert!(!switched.is_empty(), "the session should hand control to the expert at least once");
    assert_eq!(banner_intervals(&transcript), switched);
    assert_eq!(banner_intervals(&out.transcript), switched);
}
