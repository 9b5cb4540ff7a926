//! End-to-end runs of the command-line driver.

use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_tether-koopman");

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    fs::write(&p, r#"{"training": {"trajectories": 5, "samples": 20}}"#).unwrap();
    p.to_str().unwrap().to_string()
}

fn metrics_row(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert!(lines.next().unwrap().starts_with("run,settled,"));
    lines.next().unwrap().split(',').map(str::to_string).collect()
}

#[test]
fn collect_is_deterministic_and_records_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = run(&["collect", "--seed", "7", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a/dataset.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/dataset.jsonl")).unwrap());
    let run_json: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/run.json")).unwrap()).unwrap();
    assert_eq!(run_json["seed"], 7);
    assert_eq!(run_json["config"]["training"]["trajectories"], 5);
    let hash = run_json["config_hash"].as_str().unwrap();
    assert!(String::from_utf8(a).unwrap().contains(hash));
}

#[test]
fn exit_codes_distinguish_validation_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"online": {"period": 0}}"#).unwrap();
    let out = dir.path().join("out");
    let o = run(&["collect", "--config", bad.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(&bad, r#"{"unknown": {}}"#).unwrap();
    assert_eq!(run(&["collect", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--model", "/nonexistent/model.json", "--out-dir", out.to_str().unwrap()]).status.code(), Some(4));
    assert_eq!(run(&["train", "--scheme", "bogus"]).status.code(), Some(2));
}

#[test]
fn deploy_without_proxy_fails_to_settle_where_the_offline_proxy_settles() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let o = run(&["train", "--scheme", "supervised", "--out-dir", &d("train")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&d("train/training_curve.csv")).exists());
    let model = d("train/model.json");

    let o = run(&["deploy", "--proxy", "offline", "--model", &model, "--out-dir", &d("offline")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["deploy", "--proxy", "none", "--out-dir", &d("none")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let with = metrics_row(&dir.path().join("offline/metrics.csv"));
    let without = metrics_row(&dir.path().join("none/metrics.csv"));
    assert_eq!((with[0].as_str(), with[1].as_str()), ("offline", "1"));
    assert_eq!((without[0].as_str(), without[1].as_str()), ("none", "0"));
    for f in ["deploy_trace.csv", "deploy_states.svg", "deploy_error.svg", "run.json"] {
        assert!(dir.path().join("offline").join(f).exists(), "{f}");
    }
}

#[test]
fn bench_update_writes_one_row_per_window() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = run(&["bench-update", "--windows", "10", "30", "--calls", "5", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("timing.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(1).unwrap() == "window,mean_ms,std_ms,calls");
}
