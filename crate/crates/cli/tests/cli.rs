//! End-to-end checks of the `rodlab` binary: exit codes and emitted files.

use std::process::{Command, Output};

fn rodlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rodlab")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn preset(scenario: &str) -> String {
    let out = rodlab(&["preset", scenario]);
    assert_eq!(code(&out), 0);
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn unknown_scenario_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rodlab(&["run", "spiral", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scenario"));
}

#[test]
fn unknown_formulation_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rodlab(&["run", "rollup", "--formulation", "quintic", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn malformed_config_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "scenario = \"rollup\"\nmeshes = \"many\"\n").unwrap();
    let out = rodlab(&["run", "rollup", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn small_rollup_writes_tables_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = rodlab(&["run", "rollup", "--elements", "8", "--formulation", "spp", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["manifest.json", "iterations.csv", "stats.csv", "norms.csv", "stresses.csv", "snapshots.csv"] {
        assert!(dir.path().join(name).is_file(), "missing {name}");
    }
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(manifest["scenario"], "rollup");
    assert_eq!(manifest["config"]["meshes"], serde_json::json!([8]));
    assert_eq!(manifest["config"]["formulations"][0]["kind"], "nodal_spp");
}

#[test]
fn non_converged_run_exits_partial() {
    let dir = tempfile::tempdir().unwrap();
    let text = preset("rollup").replace("max_iterations = 50", "max_iterations = 1");
    let cfg = dir.path().join("starved.toml");
    std::fs::write(&cfg, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = rodlab(&[
        "run",
        "rollup",
        "--config",
        cfg.to_str().unwrap(),
        "--elements",
        "8",
        "--formulation",
        "iga",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(out_dir.join("manifest.json").is_file(), "failures are still recorded");
}

#[test]
fn preset_output_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("free.toml");
    std::fs::write(&cfg, preset("free_rod")).unwrap();
    let out_dir = dir.path().join("out");
    let out = rodlab(&[
        "run",
        "free-rod",
        "--config",
        cfg.to_str().unwrap(),
        "--formulation",
        "iga",
        "--horizon",
        "0.1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_for_another_scenario_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cat.toml");
    std::fs::write(&cfg, preset("catenary")).unwrap();
    let out = rodlab(&["run", "rollup", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn verify_passes() {
    let out = rodlab(&["verify", "--seed", "7"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS ")).count(), 5);
}
