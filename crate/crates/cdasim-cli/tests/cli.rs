//! End-to-end runs of the installed binary: exit codes, file layout,
//! provenance lines, reproducibility.

use std::env;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdasim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Fresh output directory path; removed, not created, so the test sees
/// whether the binary creates it.
fn scratch(name: &str) -> PathBuf {
    let dir = env::temp_dir().join(format!("cdasim-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn write_config(name: &str, text: &str) -> PathBuf {
    let path = env::temp_dir().join(format!("cdasim-cfg-{name}-{}.toml", std::process::id()));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn sync_writes_provenance_and_summary() {
    let out = scratch("sync");
    let o = run(&["sync", "--epochs", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "stderr: {}", stderr(&o));
    let csv = fs::read_to_string(out.join("sync_report.csv")).unwrap();
    let mut lines = csv.lines();
    let comment = lines.next().unwrap();
    assert!(
        comment.starts_with("# config=0x") && comment.ends_with("seed=1"),
        "comment line: {comment}"
    );
    assert_eq!(
        lines.next().unwrap(),
        "epoch,node,true_offset_s,est_error_s,correction_s,converged"
    );
    // 5 acquisition epochs + 2 fine epochs, 6 nodes each.
    assert_eq!(csv.lines().count(), 2 + 7 * 6);
    let text = stdout(&o);
    assert!(text.contains("per-node mean |error|"), "stdout: {text}");
}

#[test]
fn zero_epochs_runs_acquisition_only() {
    let out = scratch("sync0");
    let o = run(&["sync", "--epochs", "0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "stderr: {}", stderr(&o));
    let csv = fs::read_to_string(out.join("sync_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 5 * 6);
    assert!(stdout(&o).contains("no steady-state epochs"));
}

#[test]
fn malformed_config_exits_one_without_outputs() {
    let cfg = write_config("bad", "sede = 3\n");
    let out = scratch("bad");
    let o = run(&[
        "sync",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let text = stderr(&o);
    assert!(text.contains("config error") && text.contains("sede"), "stderr: {text}");
    assert!(!out.exists(), "no outputs on config failure");
}

#[test]
fn invalid_flag_value_is_a_config_error() {
    let o = run(&["sync", "--epochs", "soon"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_override_value_is_a_config_error() {
    let out = scratch("trials0");
    let o = run(&["beamform", "--trials", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config error"));
    assert!(!out.exists());
}

#[test]
fn unreachable_node_is_a_runtime_failure() {
    let cfg = write_config("unreach", "[network]\nunreachable = [3]\n");
    let out = scratch("unreach");
    let o = run(&[
        "sync",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unreachable"), "stderr: {}", stderr(&o));
    assert!(!out.join("sync_report.csv").exists());
}

#[test]
fn montecarlo_reruns_are_byte_identical_and_seed_sensitive() {
    let cfg = write_config(
        "mc",
        "[montecarlo]\narray_sizes = [6]\nsigma_fracs = [0.0, 0.1]\ntrials = 120\n",
    );
    let (a, b, c) = (scratch("mc-a"), scratch("mc-b"), scratch("mc-c"));
    for out in [&a, &b] {
        let o = run(&[
            "montecarlo",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "stderr: {}", stderr(&o));
    }
    let o = run(&[
        "montecarlo",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert!(o.status.success(), "stderr: {}", stderr(&o));
    let bytes_a = fs::read(a.join("montecarlo.csv")).unwrap();
    let bytes_b = fs::read(b.join("montecarlo.csv")).unwrap();
    let bytes_c = fs::read(c.join("montecarlo.csv")).unwrap();
    assert_eq!(bytes_a, bytes_b, "same config and seed, same bytes");
    assert_ne!(bytes_a, bytes_c, "different seed, different draws");
    assert!(String::from_utf8_lossy(&bytes_c).starts_with("# config=0x"));
}

#[test]
fn pattern_of_a_single_node_is_the_element_pattern() {
    let out = scratch("pat1");
    let cfg = write_config(
        "pat1",
        &format!(
            "out_dir = {:?}\nposition_error_mm = [0.0]\npattern_angles_deg = [-39.0, 0.0, 39.0]\n\
             [geometry]\nnodes = [[0.0, 0.0, 0.0]]\n",
            out.to_str().unwrap()
        ),
    );
    let o = run(&["pattern", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "stderr: {}", stderr(&o));
    let csv = fs::read_to_string(out.join("pattern.csv")).unwrap();
    let rows: Vec<(f64, f64)> = csv
        .lines()
        .skip(2)
        .map(|l| {
            let (a, p) = l.split_once(',').unwrap();
            (a.parse().unwrap(), p.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1], (0.0, 0.0), "boresight is the 0 dB reference");
    for &(angle, db) in &[rows[0], rows[2]] {
        assert!(
            (db + 3.0103).abs() < 0.05,
            "element half-power expected at {angle} deg, got {db} dB"
        );
    }
}

#[test]
fn steer_emits_measured_and_both_ideal_curves() {
    let out = scratch("steer");
    let cfg = write_config(
        "steer",
        "steer_angles_deg = [0.0, 30.0]\nsteer_repeats = 1\n",
    );
    let o = run(&[
        "steer",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "stderr: {}", stderr(&o));
    let csv = fs::read_to_string(out.join("steer_report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[1], "theta_deg,repeat,g_c,ideal,ideal_applied");
    assert_eq!(lines.len(), 4);
    let broadside: Vec<f64> = lines[2].split(',').map(|v| v.parse().unwrap()).collect();
    assert!((broadside[2] - 1.0).abs() < 1e-6, "broadside gain {}", broadside[2]);
}
