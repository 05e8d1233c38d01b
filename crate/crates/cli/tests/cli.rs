//! Exit codes and machine-readable error records of the `af1` binary.

use std::path::Path;
use std::process::{Command, Output};

fn af1(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_af1"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .output()
        .unwrap()
}

fn error_kind(out: &Output) -> String {
    let line = String::from_utf8_lossy(&out.stderr);
    let record: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    record["error"].as_str().unwrap().to_string()
}

const TINY: &str = "[model]\nn_layers = 2\nn_heads = 2\nd_model = 16\nd_head = 8\nd_mlp = 32\n\
vocab_size = 1010\nmax_seq = 16\nnorm_eps = 1e-5\n\
[train]\nsteps = 4\nbatch_size = 8\neval_every = 2\neval_samples = 10\nwarmup_steps = 1\n\
[data]\nn = 10\n";

fn tiny_workspace() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    let out = af1(dir.path(), &["--config", &cfg, "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (dir, cfg)
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = af1(dir.path(), &["grid", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = af1(dir.path(), &["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("prune-heads"));
}

#[test]
fn missing_model_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = af1(dir.path(), &["dataset"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "missing");
}

#[test]
fn missing_grid_is_reported_by_select() {
    let dir = tempfile::tempdir().unwrap();
    let out = af1(dir.path(), &["select"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "missing");
}

#[test]
fn tampered_artifact_blocks_report_and_rerun() {
    let (dir, cfg) = tiny_workspace();
    let ws = dir.path();
    let out = af1(ws, &["--config", &cfg, "dataset", "--unfiltered"]);
    assert!(out.status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.join("manifests/dataset.A+B.json")).unwrap()).unwrap();
    assert!(manifest["outputs"]["data/A+B.jsonl"].is_string());
    assert_eq!(manifest["seeds"].as_object().unwrap().len(), 5);

    let data = ws.join("data/A+B.jsonl");
    let mut text = std::fs::read_to_string(&data).unwrap();
    text.push('\n');
    std::fs::write(&data, text).unwrap();
    let out = af1(ws, &["--config", &cfg, "report"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "integrity");

    // Training reads no inputs, so it replays; the replay restores the model.
    std::fs::write(ws.join("model.af1w"), b"junk").unwrap();
    let out = af1(ws, &["rerun", "manifests/train.json", "--replay-workers", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let summary: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(summary["identical"], true);
}

#[test]
fn unfiltered_dataset_is_rejected_by_grid() {
    let (dir, cfg) = tiny_workspace();
    let ws = dir.path();
    assert!(af1(ws, &["--config", &cfg, "dataset", "--unfiltered"]).status.success());
    let out = af1(ws, &["--config", &cfg, "grid", "--wait", "dec"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "integrity");
}

#[test]
fn zero_workers_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = af1(dir.path(), &["--workers", "0", "select"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "argument");
}
