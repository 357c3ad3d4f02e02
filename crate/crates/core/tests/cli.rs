use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spark_branch::cli::BRANCH_HEADER;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spark-branch"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn spark_prints_json_report() {
    let o = run(&["spark", "--grid-n", "129"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let l = v["lambda_dagger"].as_f64().unwrap();
    assert!((l - 3.574).abs() < 1e-2, "{l}");
    assert!(v["residual_B"].as_f64().unwrap().abs() <= 1e-10);
    assert_eq!(v["in_gamma_region"], true);
    assert_eq!(v["r"].as_array().unwrap().len(), 129);
    assert_eq!(v["u_dagger"].as_array().unwrap().len(), 129);
}

#[test]
fn missing_sign_change_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"gamma": 1e-6, "grid_n": 65}"#);
    let o = run(&["spark", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(o.stdout.is_empty());
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(code(&run(&["frobnicate"])), 64);
    assert_eq!(
        code(&run(&[
            "scan", "--axis", "gamma", "--from", "2", "--to", "1", "--count", "3"
        ])),
        64
    );
    assert_eq!(code(&run(&["spark", "--grid-n", "4"])), 64);
    assert_eq!(code(&run(&["spark", "--config", "/nonexistent/run.json"])), 64);

    let dir = tempfile::tempdir().unwrap();
    for bad in ["{", "[1]", r#"{"alpha": 1}"#, r#"{"a": -2}"#] {
        let cfg = write_config(dir.path(), bad);
        assert_eq!(code(&run(&["spark", "--config", &cfg])), 64, "{bad}");
    }
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn out_flag_writes_file_and_scan_is_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scan.csv");
    let o = run(&[
        "scan",
        "--axis",
        "gamma",
        "--from",
        "0.5",
        "--to",
        "3",
        "--count",
        "4",
        "--grid-n",
        "65",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("gamma,lambda_dagger,abs_F,critical_gamma,status"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let mut prev = f64::INFINITY;
    for (k, row) in rows.iter().enumerate() {
        let gamma: f64 = row[0].parse().unwrap();
        assert!((gamma - (0.5 + 2.5 * k as f64 / 3.0)).abs() < 1e-12);
        assert_eq!(row[4], "ok");
        // more secondary emission sparks earlier
        let l: f64 = row[1].parse().unwrap();
        assert!(l < prev);
        prev = l;
        let cg: f64 = row[3].parse().unwrap();
        assert!((cg - gamma).abs() < 1e-8 * gamma.max(1.0));
    }
}

#[test]
fn branch_is_deterministic_and_reports_termination() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"grid_n": 65, "max_steps": 30}"#);
    let first = run(&["branch", "--config", &cfg]);
    let second = run(&["branch", "--config", &cfg]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], BRANCH_HEADER);
    // header, 30 steps, then the termination comment
    assert_eq!(lines.len(), 32);
    assert!(lines.last().unwrap().starts_with('#'));
    assert!(lines.last().unwrap().contains("MaxSteps"));
    assert!(String::from_utf8_lossy(&first.stderr).contains("termination: MaxSteps"));
}

#[test]
fn validate_lists_and_flags_loose_tolerances() {
    let o = run(&["validate", "--list"]);
    assert_eq!(code(&o), 0);
    let names = String::from_utf8(o.stdout).unwrap();
    assert!(names.lines().any(|l| l == "sparking_root_residual"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"root_tol": 10, "grid_n": 129}"#);
    let o = run(&["validate", "--config", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sparking_root_residual"));
}
