//! End-to-end behaviour of the `advtt` binary: error codes, manifests and
//! the diagnose command.

use serde_json::Value;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn advtt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advtt")).args(args).output().expect("binary runs")
}

fn error_code(out: &Output) -> String {
    let v: Value = serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)));
    v["error"]["code"].as_str().expect("error code").to_owned()
}

fn run_dir(dir: &Path) -> String {
    dir.display().to_string()
}

#[test]
fn ttt_without_checkpoint_reports_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let rd = run_dir(dir.path());
    let synth = advtt(&["synth", "--run-dir", &rd, "--set", "data.n_patients=5", "--set", "data.image_size=32"]);
    assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));
    let out = advtt(&["ttt", "--run-dir", &rd, "--set", "data.n_patients=5", "--set", "data.image_size=32"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_code(&out), "MISSING_CHECKPOINT");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifests/ttt.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert_eq!(manifest["error"]["code"], "MISSING_CHECKPOINT");
}

#[test]
fn synth_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let rd = run_dir(dir.path());
    let args = ["synth", "--run-dir", &rd, "--set", "data.n_patients=5", "--set", "data.image_size=32"];
    assert!(advtt(&args).status.success());
    let again = advtt(&args);
    assert_eq!(again.status.code(), Some(4));
    assert_eq!(error_code(&again), "TARGET_EXISTS");
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(advtt(&forced).status.success());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifests/synth.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "seed = 3\ntrain.learning_rte = 0.1\n").unwrap();
    let out = advtt(&["train", "--config", conf.to_str().unwrap(), "--run-dir", &run_dir(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_code(&out), "UNKNOWN_KEY");
    let out = advtt(&["train", "--run-dir", &run_dir(dir.path()), "--set", "net.depth=2"]);
    assert_eq!(error_code(&out), "UNKNOWN_KEY");
}

#[test]
fn cli_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("a.conf");
    fs::write(&conf, "seed = 3\ndata.n_patients = 5\ndata.image_size = 32\n").unwrap();
    let rd = run_dir(dir.path());
    let out = advtt(&["synth", "--config", conf.to_str().unwrap(), "--seed", "9", "--run-dir", &rd]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifests/synth.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert!(manifest["config"].as_str().unwrap().contains("data.n_patients = 5"));
}

#[test]
fn diagnose_classifies_an_equilibrium_history() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("epoch,split,loss_name,value\n");
    for e in 1..=20 {
        let wobble = 0.02 * (e as f64).sin();
        for (split, name, v) in [
            ("train", "disc_real", 1.0 + wobble),
            ("train", "disc_fake", 1.0 - wobble),
            ("val", "disc_real", 1.0 - wobble),
            ("val", "disc_fake", 1.0 + wobble),
            ("val", "anchor_gap", 0.9),
        ] {
            writeln!(csv, "{e},{split},{name},{v}").unwrap();
        }
    }
    let history = dir.path().join("history.csv");
    fs::write(&history, csv).unwrap();
    let out = advtt(&["diagnose", "--run-dir", &run_dir(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mode"], "equilibrium", "{v}");
}

#[test]
fn diagnose_without_history_reports_missing_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = advtt(&["diagnose", "--run-dir", &run_dir(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_code(&out), "MISSING_HISTORY");
}
