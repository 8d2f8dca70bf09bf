use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tactile_bench::config::resize;
use tactile_core::dataset::{regime_config, Regime};
use tactile_core::estimator::nn::Backbone;
use tactile_core::estimator::regressor::RegressorConfig;

fn tactile(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tactile"))
        .args(args)
        .current_dir(cwd)
        .env("TACTILE_OUTPUT_ROOT", cwd.join("runs"))
        .output()
        .expect("binary runs")
}

fn stderr_error(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).expect("stderr is JSON")
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

#[test]
fn missing_config_reports_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tactile(&["transfer", "--config", "nope.json"], dir.path());
    assert_eq!(stderr_error(&out)["error"]["kind"], "io");
}

#[test]
fn config_for_another_experiment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tactile_bench::ExperimentSpec::default_for(tactile_bench::ExperimentName::Transfer, 1, 20);
    let path = dir.path().join("spec.json");
    write_json(&path, &spec);
    let out = tactile(&["config-sweep", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(stderr_error(&out)["error"]["kind"], "config");
}

#[test]
fn empty_report_plot_is_a_noop() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    std::fs::write(&path, "{}").unwrap();
    let out = tactile(&["plot", "--report", path.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn render_preview_writes_two_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = tactile(&["render-preview", "--depth", "1.0", "--out", "pv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["mean_abs_diff"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("pv/reference.png").exists());
    assert!(dir.path().join("pv/press.png").exists());
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = resize(regime_config(Regime::FullState, 1, 3, "data".into()), 12, 3);
    write_json(&d.join("data.json"), &data);
    let model = RegressorConfig {
        backbone: Backbone::Strided { widths: vec![4, 4] },
        epochs: 1,
        batch_size: 4,
        ..RegressorConfig::default()
    };
    write_json(&d.join("model.json"), &model);

    let out = tactile(&["gen-dataset", "--config", "data.json"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["records"], 12);

    let out = tactile(
        &["train", "--config", "model.json", "--data", "data/manifest.jsonl", "--model", "m.ckpt"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("m.ckpt").exists());

    let out = tactile(&["eval", "--data", "data/manifest.jsonl", "--model", "m.ckpt"], d);
    assert_eq!(stderr_error(&out)["error"]["kind"], "leakage");

    let out = tactile(&["gen-dataset", "--config", "data.json", "--seed", "4", "--out", "test"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = tactile(&["eval", "--data", "test/manifest.jsonl", "--model", "m.ckpt", "--out", "eval"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["samples"], 12);
    assert!(d.join("eval/metrics.json").exists());
}
