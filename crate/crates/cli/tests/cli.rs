use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kbgain::riccati::CostBreakdown;
use kbgain::scalar::ScalarProblem;
use kbgain::simulate::{MseVerdict, SimulationReport};
use serde_json::Value;

fn kbgain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbgain"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn write_problem(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

const SCALAR: &str = r#"{"A": [[-0.595]], "B": [[1.0]], "X0": [[1.0]], "t0": 0, "t1": 10, "alpha": 0.476, "gamma": 1}"#;

#[test]
fn classify_from_flags() {
    let out = kbgain(&["classify", "--a", "-0.595", "--gamma", "1", "--alpha", "0.476"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["case"], "B");
    assert!((v["stationary_point"]["x"].as_f64().unwrap() - 0.476f64.sqrt()).abs() < 1e-12);
}

#[test]
fn classify_from_file_matches_flags() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_problem(dir.path(), "p.json", SCALAR);
    for (alpha, case) in [("0.926", "A"), ("0.476", "B"), ("0.173", "C")] {
        let v = stdout_json(&kbgain(&["classify", &p, "--alpha", alpha]));
        assert_eq!(v["case"], case);
    }
}

#[test]
fn stationary_case_a() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_problem(
        dir.path(),
        "a.json",
        r#"{"A": [[-0.5]], "B": [[1.0]], "X0": [[1.0]], "t0": 0, "t1": 5, "alpha": 2, "gamma": 100}"#,
    );
    let out = kbgain(&["solve-stationary", &p, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert!((v["x_star"].as_f64().unwrap() - 1.0).abs() < 1e-7, "{v}");
    assert!(v["u_star"].as_f64().unwrap().abs() < 1e-7);
    assert_eq!(v["certified"], true);
    let spectrum = fs::read_to_string(dir.path().join("o/rank_spectrum.csv")).unwrap();
    assert_eq!(spectrum.lines().next(), Some("index,eigenvalue"));
    assert_eq!(spectrum.lines().count(), 3);
}

#[test]
fn stationary_from_flags() {
    let v = stdout_json(&kbgain(&["solve-stationary", "--a", "-0.595", "--alpha", "0.173", "--gamma", "1"]));
    assert!((v["x_star"].as_f64().unwrap() - 0.568_626).abs() < 1e-6);
    assert!((v["u_star"].as_f64().unwrap() - 1.0).abs() < 1e-7);
}

#[test]
fn missing_file_is_usage_error() {
    let out = kbgain(&["solve-scalar", "/nonexistent/problem.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(kbgain(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(kbgain(&["classify", "--a", "-0.5"]).status.code(), Some(2));
    assert_eq!(kbgain(&["simulate", "x.json", "--paths", "many"]).status.code(), Some(2));
}

#[test]
fn malformed_json_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_problem(dir.path(), "bad.json", "{\"A\": [[-1.0]]");
    assert_eq!(kbgain(&["riccati", &p]).status.code(), Some(2));
}

#[test]
fn domain_error_emits_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_problem(
        dir.path(),
        "unstable.json",
        r#"{"A": [[0.5]], "B": [[1.0]], "X0": [[1.0]], "t0": 0, "t1": 5, "alpha": 2, "gamma": 100}"#,
    );
    let out = kbgain(&["solve-scalar", &p]);
    assert_eq!(out.status.code(), Some(1));
    let v = stdout_json(&out);
    assert_eq!(v["error"], "model");
    assert!(v["message"].as_str().unwrap().contains("Hurwitz"));
}

#[test]
fn solve_scalar_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_problem(dir.path(), "p.json", SCALAR);
    let out_dir = dir.path().join("out");
    let out = kbgain(&["solve-scalar", "--input", &p, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("result.json")).unwrap()).unwrap();
    assert_eq!(v, stdout_json(&out));
    let problem: ScalarProblem = serde_json::from_value(v["problem"].clone()).unwrap();
    assert_eq!(problem, ScalarProblem::new(-0.595, 0.476, 1.0, 1.0, 0.0, 10.0).unwrap());
    let cost: CostBreakdown = serde_json::from_value(v["cost"].clone()).unwrap();
    assert!(cost.cost > 0.0);
    for r in v["switch_residuals"].as_array().unwrap() {
        assert!(r.as_f64().unwrap().abs() <= 1e-8);
    }
    let traj = fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    let mut lines = traj.lines();
    assert_eq!(lines.next(), Some("t,x,p,u,segment"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    // 17 significant digits.
    assert_eq!(first[1], "1.0000000000000000e0");
    assert!(out_dir.join("phase_field.csv").exists());
}

#[test]
fn verify_pmp_on_analytic_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_problem(dir.path(), "p.json", SCALAR);
    let v = stdout_json(&kbgain(&["verify-pmp", &p]));
    assert!(v["max_gap"].as_f64().unwrap() <= 1e-5, "{v}");
    assert!((v["dt"].as_f64().unwrap() - 10.0 / 8192.0).abs() < 1e-15);
}

#[test]
fn riccati_with_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_problem(
        dir.path(),
        "s.json",
        r#"{"A": [[-1.0, 0.0], [0.0, -2.0]], "B": [[1.0, 0.0], [0.0, 1.0]], "X0": [[0.5, 0.0], [0.0, 0.25]],
            "t0": 0, "t1": 2, "alpha": 0.1, "gamma": 4,
            "schedule": {"breakpoints": [0, 1, 2], "gains": [[[0.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]]}}"#,
    );
    let out_dir = dir.path().join("r");
    let v = stdout_json(&kbgain(&["riccati", &p, "--dt", "0.001", "--out", out_dir.to_str().unwrap()]));
    let cost: CostBreakdown = serde_json::from_value(v["cost"].clone()).unwrap();
    // u = 0 keeps each diagonal entry at its equilibrium 1/(2|a|) on [0, 1].
    assert!(cost.mse_integral > 0.75 && cost.mi > 0.0);
    let csv = fs::read_to_string(out_dir.join("riccati.csv")).unwrap();
    assert!(csv.starts_with("t,x_0_0,x_0_1,x_1_1,tr_x,tr_ux\n"));
    assert_eq!(csv.lines().count(), 1 + 2001);
}

#[test]
fn simulate_emits_paths() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_problem(dir.path(), "p.json", SCALAR);
    let out_dir = dir.path().join("sim");
    let args = ["simulate", &p, "--paths", "300", "--dt", "0.01", "--seed", "7", "--emit-paths", "--out", out_dir.to_str().unwrap()];
    let v = stdout_json(&kbgain(&args));
    let report: SimulationReport = serde_json::from_value(v["report"].clone()).unwrap();
    let verdict: MseVerdict = serde_json::from_value(v["verdict"].clone()).unwrap();
    assert_eq!(report.num_paths, 300);
    assert_eq!(verdict.z_score, report.z_score);
    let paths = fs::read_to_string(out_dir.join("paths.csv")).unwrap();
    assert_eq!(paths.lines().count(), 301);
    let again = stdout_json(&kbgain(&args));
    assert_eq!(v, again);
}

#[test]
fn experiment_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let d = dir.path().join(name);
        let args = ["experiment", "--n", "3", "--trials", "4", "--seed", "5", "--alphas", "0.01,1,10", "--gamma", "3", "--out", d.to_str().unwrap()];
        assert_eq!(kbgain(&args).status.code(), Some(0));
        d
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["result.json", "rank_spectra.csv", "gain_spectra.csv", "alpha_sweep.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let v: Value = serde_json::from_slice(&fs::read(a.join("result.json")).unwrap()).unwrap();
    assert_eq!(v["succeeded"], 4);
    assert_eq!(v["alpha_sweep"].as_array().unwrap().len(), 3);
}
