//! End-to-end runs of the `uldp` binary: files written and exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn run(dir: &Path, sub: &str, config: &str, extra: &[&str]) -> i32 {
    let cfg = dir.join("config.json");
    fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_uldp"))
        .arg(sub)
        .arg("--config")
        .arg(&cfg)
        .arg("--output")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap();
    status.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_CHECK: &str = r#""check": {"samples": 800, "pair_samples": 1600}"#;

#[test]
fn check_ou_passes() {
    let d = tempfile::tempdir().unwrap();
    let cfg = format!(r#"{{"system": {{"name": "ou", "params": {{"d": 2}}}}, {SMALL_CHECK}}}"#);
    assert_eq!(run(d.path(), "check", &cfg, &[]), 0);
    let files = fs::read_dir(d.path().join("out")).unwrap().count();
    assert_eq!(files, 7);
}

#[test]
fn check_hamiltonian_writes_trace_margin() {
    let d = tempfile::tempdir().unwrap();
    let cfg = format!(r#"{{"system": {{"name": "hamiltonian-dw"}}, {SMALL_CHECK}}}"#);
    assert_eq!(run(d.path(), "check", &cfg, &[]), 0);
    let r = json(&d.path().join("out/check_trace_lower.json"));
    assert_eq!(r["passed"], Value::Bool(true));
    assert!(r["worst_margin"].as_f64().unwrap() >= 0.0);
}

#[test]
fn check_square_gamma_fails_ratio_bounds() {
    let d = tempfile::tempdir().unwrap();
    let cfg = format!(r#"{{"system": {{"name": "ou", "gamma": "square"}}, {SMALL_CHECK}}}"#);
    assert_eq!(run(d.path(), "check", &cfg, &[]), 1);
    let r = json(&d.path().join("out/check_ratio_bounds.json"));
    assert_eq!(r["passed"], Value::Bool(false));
}

#[test]
fn minact_brownian_rate() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{"system": {"name": "brownian"}, "n_steps": 200,
                  "minact": {"x0": [0], "target": [1]}}"#;
    assert_eq!(run(d.path(), "minact", cfg, &[]), 0);
    let r = json(&d.path().join("out/minact.json"));
    assert!((r["rate"].as_f64().unwrap() - 0.5).abs() <= 1e-3);
    let csv = fs::read_to_string(d.path().join("out/minact_control.csv")).unwrap();
    assert!(csv.starts_with("t,h1\n"));
    assert_eq!(csv.lines().count(), 201);
    let g = json(&d.path().join("out/gradient_check.json"));
    assert!(g["max_rel_error"].as_f64().unwrap() <= 1e-7);
}

#[test]
fn minact_hamiltonian_converges() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{"system": {"name": "hamiltonian-dw"}, "n_steps": 100,
                  "minact": {"x0": [-1, 0], "target": [1, 0]}}"#;
    assert_eq!(run(d.path(), "minact", cfg, &[]), 0);
    let r = json(&d.path().join("out/minact.json"));
    let rate = r["rate"].as_f64().unwrap();
    assert!(rate.is_finite() && rate > 0.0);
    let t = json(&d.path().join("out/minact_telemetry.json"));
    assert_eq!(t["converged"], Value::Bool(true));
    assert!(t["mismatch"].as_f64().unwrap() <= 1e-6 * (1.0 + 1.0));
}

#[test]
fn minact_unreachable_target_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{"system": {"name": "brownian", "params": {"d": 2, "m": 1}}, "n_steps": 20,
                  "minact": {"x0": [0, 0], "target": [1, 1]}}"#;
    assert_eq!(run(d.path(), "minact", cfg, &[]), 1);
    let r = json(&d.path().join("out/minact.json"));
    assert_eq!(r["rate"], Value::String("inf".into()));
    assert!(!d.path().join("out/minact_control.csv").exists());
}

#[test]
fn study_brownian_ldp_rows() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{"system": {"name": "brownian"}, "n_steps": 10, "trials": 20000,
                  "epsilons": [0.5, 0.3, 0.2],
                  "study": {"ldp": {"x0": [0], "event": {"kind": "terminal_at_least", "threshold": 1}}}}"#;
    assert_eq!(run(d.path(), "study", cfg, &[]), 0);
    let csv = fs::read_to_string(d.path().join("out/ldp.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epsilon,p_hat,ci_lo,ci_hi,neg_eps_log_p,i_ref");
    assert_eq!(lines.len(), 4);
    for (line, eps) in lines[1..].iter().zip([0.5f64, 0.3, 0.2]) {
        let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let exact = 0.5 * libm::erfc(1.0 / (2.0 * eps).sqrt());
        let se = (exact * (1.0 - exact) / 20000.0).sqrt();
        assert!((cols[1] - exact).abs() <= 4.0 * se, "{line}");
    }
}

#[test]
fn study_condition_ii_zero_epsilon_row() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{"system": {"name": "ou"}, "n_steps": 50, "epsilons": [0, 0.01],
                  "study": {"condition_ii": {"x_grid": [[0], [1]], "control": {"kind": "constant", "value": [0.5]}}}}"#;
    assert_eq!(run(d.path(), "study", cfg, &[]), 0);
    let csv = fs::read_to_string(d.path().join("out/condition_ii.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epsilon,x_id,median,q90"));
    assert_eq!(lines.next(), Some("0,0,0,0"));
    assert_eq!(lines.next(), Some("0,1,0,0"));
}

#[test]
fn study_condition_i_table() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{"system": {"name": "brownian"}, "n_steps": 512,
                  "study": {"condition_i": {"x": [0], "x_seq": [[0]], "freqs": [4, 16, 64],
                            "amplitude": 1, "direction": [1]}}}"#;
    assert_eq!(run(d.path(), "study", cfg, &[]), 0);
    let csv = fs::read_to_string(d.path().join("out/condition_i.csv")).unwrap();
    assert!(csv.starts_with("n,freq,x_offset,sup_distance\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn simulate_writes_trajectories() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{"system": {"name": "hamiltonian-dw"}, "n_steps": 20, "epsilons": [0.01],
                  "simulate": {"x0": [0.5, 0.5], "trajectories": 2}}"#;
    assert_eq!(run(d.path(), "simulate", cfg, &[]), 0);
    let csv = fs::read_to_string(d.path().join("out/trajectory_1.csv")).unwrap();
    assert!(csv.starts_with("t,x1,x2\n"));
    assert_eq!(csv.lines().count(), 22);
    assert!(d.path().join("out/trajectory_0.json").exists());
}

#[test]
fn usage_errors_exit_two_before_computing() {
    let d = tempfile::tempdir().unwrap();
    let typo = r#"{"system": {"name": "ou"}, "n_step": 10, "check": {}}"#;
    assert_eq!(run(d.path(), "check", typo, &[]), 2);
    assert!(!d.path().join("out").exists());
    let unknown = r#"{"system": {"name": "lorenz"}, "check": {}}"#;
    assert_eq!(run(d.path(), "check", unknown, &[]), 2);
    let no_block = r#"{"system": {"name": "ou"}}"#;
    assert_eq!(run(d.path(), "minact", no_block, &[]), 2);
    let bad_dim = r#"{"system": {"name": "ou"}, "minact": {"x0": [0, 0], "target": [1]}}"#;
    assert_eq!(run(d.path(), "minact", bad_dim, &[]), 2);
    let bad_grid = r#"{"system": {"name": "ou"}, "n_steps": 10, "epsilons": [0.1],
                       "simulate": {"x0": [0], "control": {"kind": "values", "cells": [[1], [2], [3]]}}}"#;
    assert_eq!(run(d.path(), "simulate", bad_grid, &[]), 2);
    let status = Command::new(env!("CARGO_BIN_EXE_uldp")).arg("check").output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    let status = Command::new(env!("CARGO_BIN_EXE_uldp")).arg("frobnicate").output().unwrap();
    assert_eq!(status.status.code(), Some(2));
}

#[test]
fn blow_up_exits_one() {
    let d = tempfile::tempdir().unwrap();
    // explicit Euler on the double well from far out overflows at a coarse step
    let cfg = r#"{"system": {"name": "hamiltonian-dw"}, "n_steps": 4, "epsilons": [0],
                  "simulate": {"x0": [50, 0]}}"#;
    assert_eq!(run(d.path(), "simulate", cfg, &[]), 1);
}

#[test]
fn seed_flag_overrides_config() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{"system": {"name": "ou"}, "n_steps": 10, "epsilons": [0.1], "seed": 1,
                  "simulate": {"x0": [0]}}"#;
    assert_eq!(run(d.path(), "simulate", cfg, &[]), 0);
    let a = fs::read_to_string(d.path().join("out/trajectory_0.csv")).unwrap();
    assert_eq!(run(d.path(), "simulate", cfg, &["--seed", "2"]), 0);
    let b = fs::read_to_string(d.path().join("out/trajectory_0.csv")).unwrap();
    assert_ne!(a, b);
}
