//! End-to-end smoke tests of the `rmlmc` binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rmlmc"))
}

fn read_csv(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn run_smoke_on_deterministic_chain() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let status = bin()
        .args([
            "run", "--model", "det", "--family", "single", "--scheme", "str,iid", "--n", "8,64",
            "--reps", "50", "--seed", "7", "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let lines = read_csv(&out);
    assert_eq!(
        lines[0],
        "model,family,scheme,n,reps,mean,stderr,mean_cost,ire,truth,faults,seconds"
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("det,single,str,8,50,1.0,"));
}

#[test]
fn run_smoke_on_gbm() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let status = bin()
        .args([
            "run", "--model", "gbm", "--family", "single", "--scheme", "str", "--n", "1000",
            "--reps", "100", "--seed", "7", "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let lines = read_csv(&out);
    assert_eq!(lines.len(), 2);
    let mean: f64 = lines[1].split(',').nth(5).unwrap().parse().unwrap();
    assert!((mean - 0.1045).abs() < 0.01, "mean {mean}");
}

#[test]
fn tune_then_run_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let dist = dir.path().join("cir.toml");
    let pilot = dir.path().join("pilot.csv");
    let status = bin()
        .args([
            "tune",
            "--model",
            "cir",
            "--max-level",
            "6",
            "--pilot",
            "2000",
            "--gamma",
            "1.5",
        ])
        .args(["--seed", "3", "--out"])
        .arg(&dist)
        .arg("--pilot-out")
        .arg(&pilot)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&dist).unwrap();
    assert!(text.contains("head = ["));
    assert!(text.contains("gamma = 1.5"));
    let pilot_lines = read_csv(&pilot);
    assert_eq!(pilot_lines[0], "level,count,mean,var,cost,var_to_ref");
    assert_eq!(pilot_lines.len(), 7);

    let out = dir.path().join("report.json");
    let status = bin()
        .args([
            "run", "--model", "cir", "--family", "single", "--scheme", "res", "--n", "500",
        ])
        .args(["--reps", "50", "--seed", "1", "--format", "json", "--dist"])
        .arg(&dist)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["cells"][0]["scheme"], "res");
}

#[test]
fn run_accepts_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("experiment.toml");
    std::fs::write(
        &config,
        r#"
model = "det"
families = ["single"]
schemes = ["sys"]
ns = [16]
replications = 20
seed = 5
threads = 2

[dist]
kind = "default"
"#,
    )
    .unwrap();
    let output = bin()
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("det,single,sys,16,20,1.0,"), "stdout: {text}");
}

#[test]
fn canonical_runs_are_byte_identical() {
    let run = || {
        bin()
            .args([
                "run",
                "--model",
                "det",
                "--family",
                "single",
                "--scheme",
                "res",
                "--n",
                "32",
                "--reps",
                "40",
                "--seed",
                "9",
                "--canonical",
            ])
            .output()
            .unwrap()
    };
    let a = run();
    let b = run();
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn oracle_check_exits_zero() {
    let output = bin()
        .args(["oracle-check", "--seed", "4"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(
        text.lines().filter(|l| l.starts_with("PASS")).count() >= 5,
        "{text}"
    );
    assert!(!text.contains("FAIL"));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let output = bin().args(["run", "--model", "nonsense"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let output = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let output = bin().arg("run").output().unwrap();
    assert_eq!(
        output.status.code(),
        Some(2),
        "run without --model or --config"
    );
}
