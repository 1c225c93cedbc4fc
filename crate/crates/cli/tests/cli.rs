//! Black-box tests of the `planeshift` binary: subcommand wiring, config
//! overrides, exit codes, and the end-to-end artifact layout.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_planeshift"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "seed": 9,
        "out_dir": dir.join("run"),
        "data": {"n_train": 40, "n_val": 10, "n_test": 14, "balance": 0.3},
        "diffusion": {
            "t_train": 40, "t_sample": 20,
            "train": {"iterations": 30, "batch_size": 4,
                       "arch": {"base_channels": 4, "time_dim": 8}}
        },
        "classifier": {
            "segmenter": {"iterations": 30, "batch_size": 4},
            "predictor": {"iterations": 30, "batch_size": 4}
        },
        "oracle": {"iterations": 30, "batch_size": 4},
        "features": {"dim": 8, "train": {"iterations": 30, "batch_size": 4}},
        "guidance": {
            "tau": 5, "iterations": 2, "lambda_c": 8.0, "lambda_p": 4.0,
            "lambda_c_candidates": [8.0]
        },
        "generate": {"max_images": 2, "jobs": 1},
        "ablation": {"taus": [3, 6], "include_lambda_heavy": false,
                      "include_lp_off": true, "max_images": 2}
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn usage_errors_exit_two() {
    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_upstream_exits_one_with_stage_hint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = run(&["train-diffusion", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("synth"), "stderr: {stderr}");
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let c = config.to_str().unwrap();

    for cmd in [
        "synth",
        "train-diffusion",
        "train-classifier",
        "train-oracle",
        "train-features",
    ] {
        let out = run(&[cmd, "--config", c]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    let out = run(&["generate", "--config", c]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["evaluate", "--config", c]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["report", "--config", c]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("method diff_ice"), "stdout: {stdout}");
    assert!(stdout.contains("iter"), "stdout: {stdout}");

    // Artifact layout.
    let root = dir.path().join("run");
    for sub in [
        "data/manifest.json",
        "data/splits.json",
        "checkpoints/diffusion/manifest.json",
        "checkpoints/classifier/manifest.json",
        "checkpoints/oracle/manifest.json",
        "checkpoints/feat_guid/manifest.json",
        "checkpoints/feat_eval/manifest.json",
        "records/diff_ice/timings.json",
        "reports/diff_ice/report.json",
        "reports/diff_ice/metrics.csv",
        "reports/diff_ice/efficiency.csv",
        "reports/diff_ice/qd_vs_qs_th.csv",
        "reports/diff_ice/qd_vs_qs_csp.csv",
        "reports/diff_ice/qd_vs_qs_fp.csv",
        "reports/diff_ice/qd_vs_qs_overall.csv",
    ] {
        assert!(root.join(sub).exists(), "missing {sub}");
    }

    // Ablation grid: 2 taus x (lp on/off) = 4 cells.
    let out = run(&["generate", "--config", c, "--ablation"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["evaluate", "--config", c, "--ablation"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ablation = fs::read_to_string(root.join("reports/ablation/ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 1 + 4, "rows: {ablation}");

    // Report row count equals methods x iterations.
    let metrics = fs::read_to_string(root.join("reports/diff_ice/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2);
}

#[test]
fn flag_overrides_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out_override = dir.path().join("elsewhere");
    let out = run(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_override.to_str().unwrap(),
        "--seed",
        "123",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out_override.join("data/manifest.json").exists());
    let manifest: serde_json::Value = serde_json::from_slice(
        &fs::read(out_override.join("data/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["seed"], 123);
}
