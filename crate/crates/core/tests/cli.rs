mod common;

use std::path::Path;
use std::process::{Command, Output};

fn specflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specflow"))
        .current_dir(dir)
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), common::TINY_TOML).unwrap();
    dir
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let dir = setup();
    let out = specflow(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_0() {
    let out = Command::new(env!("CARGO_BIN_EXE_specflow")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-data", "train-main", "train-draft", "run", "bench", "report", "verify-selftest"] {
        assert!(text.contains(sub), "help lists {sub}");
    }
}

#[test]
fn config_errors_exit_1() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "[runtime]\nreplan = 12\nbogus = 1\n").unwrap();
    let out = specflow(dir.path(), &["verify-selftest", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("runtime"));
    assert_eq!(specflow(dir.path(), &["run", "--config", "tiny.toml"]).status.code(), Some(1));
    assert_eq!(specflow(dir.path(), &["verify-selftest", "--delta", "-1"]).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_runtime_failure() {
    let dir = setup();
    let out = specflow(dir.path(), &["train-draft", "--config", "tiny.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selftest_passes() {
    let dir = setup();
    let out = specflow(dir.path(), &["verify-selftest"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

#[test]
fn staged_training_then_run_is_byte_identical() {
    let dir = setup();
    let d = dir.path();
    for sub in ["gen-data", "train-main", "train-draft"] {
        let out = specflow(d, &[sub, "--config", "tiny.toml"]);
        assert_eq!(out.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(d.join("out/dataset.json").exists());
    assert!(d.join("out/models.ckpt").exists());
    let trace = d.join("out/run_trace.jsonl");
    let first_out = specflow(d, &["run", "--config", "tiny.toml", "--seed", "7"]);
    assert_eq!(first_out.status.code(), Some(0));
    let first = std::fs::read(&trace).unwrap();
    let second_out = specflow(d, &["run", "--config", "tiny.toml", "--seed", "7"]);
    assert_eq!(second_out.status.code(), Some(0));
    assert_eq!(first, std::fs::read(&trace).unwrap());
    assert_eq!(first_out.stdout, second_out.stdout);
    let other = specflow(d, &["run", "--config", "tiny.toml", "--seed", "8"]);
    assert_eq!(other.status.code(), Some(0));
    assert_ne!(first, std::fs::read(&trace).unwrap());
}

#[test]
fn bench_writes_reports_and_report_refolds_them() {
    let dir = setup();
    let d = dir.path();
    let out = specflow(d, &["bench", "--config", "tiny.toml", "--seed", "1", "--grid", "components", "--out-dir", "res"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.csv", "report.json", "traces.jsonl", "models.ckpt"] {
        assert!(d.join("res").join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(d.join("res/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16);
    let header = csv.lines().next().unwrap();
    for col in ["SR", "Lat_ms", "per_action_ms", "FR", "Acc", "speedup"] {
        assert!(header.split(',').any(|c| c == col), "{col}");
    }

    let rep = specflow(d, &["report", "--out-dir", "res"]);
    assert_eq!(rep.status.code(), Some(0), "{}", String::from_utf8_lossy(&rep.stderr));
    assert_eq!(String::from_utf8_lossy(&rep.stdout), csv);

    let json = d.join("res/report.json");
    let tampered = std::fs::read_to_string(&json).unwrap().replacen("\"successes\": ", "\"successes\": 9", 1);
    std::fs::write(&json, tampered).unwrap();
    assert_eq!(specflow(d, &["report", "--out-dir", "res"]).status.code(), Some(2));
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = specflow::bench::config::Config::load(&path).unwrap();
    assert_eq!(cfg, specflow::bench::config::Config::default());
}
