use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lorafed"))
}

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("examples/scenarios")
        .join(name)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn validate_accepts_examples() {
    for name in ["baseline_100.toml", "multicluster_delegation.toml"] {
        let out = bin()
            .args(["validate", "--scenario"])
            .arg(example(name))
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("missing.toml", None),
        ("syntax.toml", Some("mode = \"baseline\"\ndevice_count = [")),
        ("unknown_key.toml", Some("mode = \"baseline\"\nbogus = 1\n")),
        ("bad_mode.toml", Some("mode = \"mesh\"\n")),
        (
            "payload.toml",
            Some("mode = \"baseline\"\n[devices]\npayload_max = 300\n"),
        ),
        (
            "unfair.toml",
            Some("mode = \"baseline\"\ndevice_count = 10\ndevice_actors = 2\n"),
        ),
        ("duty.toml", Some("mode = \"baseline\"\n[devices]\nduty_limit = 1.5\n")),
        (
            "disconnected.toml",
            Some("mode = \"flip\"\n[clusters]\ncount = 2\nedges = []\n"),
        ),
    ];
    for (name, text) in cases {
        let path = match text {
            Some(t) => write(dir.path(), name, t),
            None => dir.path().join(name),
        };
        for sub in ["validate", "run"] {
            let mut cmd = bin();
            cmd.args([sub, "--scenario"]).arg(&path);
            if sub == "run" {
                cmd.args(["--seed", "1", "--out"]).arg(dir.path().join("out"));
            }
            let out = cmd.output().unwrap();
            assert_eq!(code(&out), 1, "{sub} {name}: {}", String::from_utf8_lossy(&out.stderr));
        }
    }
}

#[test]
fn bad_sweep_arguments_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["sweep", "--modes", "mesh", "--counts", "10", "--repeats", "1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    let out = bin()
        .args(["sweep", "--modes", "flip", "--counts", "10", "--repeats", "0", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn unwritable_output_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = write(dir.path(), "file", "not a directory");
    let out = bin()
        .args(["run", "--scenario"])
        .arg(example("baseline_100.toml"))
        .args(["--seed", "1", "--out"])
        .arg(blocker.join("sub"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_writes_log_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "--scenario"])
        .arg(example("baseline_100.toml"))
        .args(["--seed", "2", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(dir.path().join("events.log")).unwrap();
    assert!(log.lines().count() > 1000);
    for line in log.lines() {
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        assert!(fields.len() >= 3, "{line}");
        fields[0].parse::<f64>().unwrap();
    }
    let metrics: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["join_ratio"].as_f64().unwrap() > 0.9);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([2]));
    assert_eq!(manifest["scenario"]["device_count"], 100);
    assert!(manifest["scenario"]["protocol"]["round_time"].is_number());
}

#[test]
fn sweep_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "sweep",
            "--modes",
            "baseline,flip",
            "--counts",
            "20,40",
            "--repeats",
            "2",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("join_ratio.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("device_count,mode,metric_mean,metric_std"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().any(|r| r.starts_with("40,flip,")));
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([1, 2]));
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 8);
}

#[test]
fn sweep_altruist_both_labels_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "sweep",
            "--modes",
            "flip",
            "--counts",
            "20",
            "--repeats",
            "1",
            "--altruist",
            "both",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let csv = std::fs::read_to_string(dir.path().join("delivered.csv")).unwrap();
    assert!(csv.contains(",flip_altruist,") && csv.contains(",flip_selfish,"));
}
