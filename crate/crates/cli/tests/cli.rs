//! End-to-end tests of the `fedskd` binary: exit codes, artifacts, and
//! byte-level determinism through the process boundary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedskd"))
}

fn write_cfg(dir: &Path) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(
        &path,
        r#"
method = "fedskd"
n_clients = 2
rounds = 1
iters_per_round = 1
seed = 11
lr = 0.001
batch_size = 4

[model]
base_width = 4
width_step = 0
tap_layers = [2, 3]

[dataset]
samples_per_client = 24
shape = [1, 12, 12]

[partitioner]
method = "iid"
"#,
    )
    .unwrap();
    path
}

fn run_dir_from_stdout(out: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout
        .lines()
        .find(|l| l.starts_with("run dir: "))
        .expect("run dir line");
    PathBuf::from(line.trim_start_matches("run dir: "))
}

#[test]
fn run_succeeds_and_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let out_root = dir.path().join("out");
    let run = |label: &str| {
        let out = bin()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--set")
            .arg(format!("output_dir={:?}", out_root.to_str().unwrap()))
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{label}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        run_dir_from_stdout(&out)
    };
    let a = run("first");
    let b = run("second");
    assert_ne!(a, b);
    let csv_a = std::fs::read(a.join("metrics.csv")).unwrap();
    let csv_b = std::fs::read(b.join("metrics.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    assert!(a.join("rounds.jsonl").exists());
    assert!(a.join("config.resolved.toml").exists());
    assert!(a.join("checkpoints/client_0.fskd").exists());
}

#[test]
fn invalid_method_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "method = \"nonsense\"\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn invalid_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--set", "skd_start_fraction=2.0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_rounds_writes_initial_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let out_root = dir.path().join("out");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--set")
        .arg(format!("output_dir={:?}", out_root.to_str().unwrap()))
        .args(["--set", "rounds=0"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let run_dir = run_dir_from_stdout(&out);
    assert!(run_dir.join("checkpoints/client_0.fskd").exists());
    assert!(run_dir.join("checkpoints/client_1.fskd").exists());
}

#[test]
fn evaluate_round_trips_and_reports_missing_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let out_root = dir.path().join("out");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--set")
        .arg(format!("output_dir={:?}", out_root.to_str().unwrap()))
        .output()
        .unwrap();
    assert!(out.status.success());
    let run_dir = run_dir_from_stdout(&out);

    let eval = bin()
        .args(["evaluate", "--run-dir"])
        .arg(&run_dir)
        .args(["--scope", "local"])
        .output()
        .unwrap();
    assert!(eval.status.success());
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.lines().count() > 1);
    assert!(stdout.lines().skip(1).all(|l| l.contains(",local,")));

    let missing = bin()
        .args(["evaluate", "--run-dir"])
        .arg(dir.path().join("nope"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn env_var_overrides_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let env_root = dir.path().join("env_out");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .env("FEDSKD_LAB_OUT", &env_root)
        .output()
        .unwrap();
    assert!(out.status.success());
    let run_dir = run_dir_from_stdout(&out);
    assert!(run_dir.starts_with(&env_root));
}
