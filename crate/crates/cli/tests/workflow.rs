use std::path::Path;
use std::process::{Command, Output};

fn tactile(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tactile")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = tactile(args);
    assert!(out.status.success(), "tactile {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_calibrate_run() {
    let dir = tempfile::tempdir().unwrap();
    let protocol = dir.path().join("protocol.json");
    std::fs::write(
        &protocol,
        r#"{"train_val_records": 300, "test_records": 60}"#,
    )
    .unwrap();
    let chr = dir.path().join("chr");
    ok(&["simulate", "--scenario", "characterization", "--seed", "1", "--out", s(&chr), "--params", s(&protocol)]);
    let model = dir.path().join("model.json");
    let out = ok(&[
        "calibrate",
        "--dataset",
        s(&chr.join("characterization.csv")),
        "--test",
        s(&chr.join("characterization_test.csv")),
        "--max-order",
        "3",
        "--out",
        s(&model),
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["orders"]["g1"].as_u64().unwrap() >= 1);
    assert!(summary["test"].is_object());

    let seq = dir.path().join("seq");
    ok(&["simulate", "--scenario", "compliance", "--seed", "2", "--out", s(&seq)]);
    let manifest = seq.join("manifest.json");
    assert!(manifest.exists());
    let events = dir.path().join("events.csv");
    let out = ok(&["run", "--manifest", s(&manifest), "--model", s(&model), "--out", s(&events)]);
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["frames"], 40);
    assert!(metrics["events"].as_u64().unwrap() > 0);
    let log = std::fs::read_to_string(&events).unwrap();
    assert_eq!(log.lines().count() as u64, metrics["events"].as_u64().unwrap() + 1);
}

#[test]
fn scenario_params_override() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    std::fs::write(&params, r#"{"hold_frames": 5, "ramp_frames": 2}"#).unwrap();
    ok(&["simulate", "--scenario", "two_perch", "--out", s(dir.path()), "--params", s(&params)]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["frames"].as_array().unwrap().len(), 7);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = tactile(&["simulate", "--scenario", "nope", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"thresholds": {"mask_mag": -1.0}}"#).unwrap();
    ok(&["simulate", "--scenario", "two_perch", "--out", s(dir.path())]);
    let out = tactile(&[
        "run",
        "--manifest",
        s(&dir.path().join("manifest.json")),
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("e.csv")),
    ]);
    assert!(!out.status.success());

    let out = tactile(&["bench", "--resolution", "wide"]);
    assert!(!out.status.success());
}

#[test]
fn small_bench_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    let out = ok(&["bench", "--resolution", "320x180", "--frames", "20", "--json", s(&json)]);
    let a: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let b: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a["width"], 320);
    assert_eq!(a["frames"], 20);
}
