use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn datapath(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_datapath"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = datapath(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Small fixture plus attacked class-0 pairs, built once per test.
fn prepared(dir: &Path) -> PathBuf {
    let fx = dir.join("fx");
    ok(&["fixture", "--out-dir", fx.to_str().unwrap(), "--train-size", "160", "--epochs", "3", "--test-size", "40"]);
    ok(&[
        "attack",
        "--model",
        &p(&fx, "model.json"),
        "--examples",
        &p(&fx, "test.examples"),
        "--epsilon",
        "0.1",
        "--out",
        &p(dir, "adv.examples"),
    ]);
    fx
}

fn extract(dir: &Path, fx: &Path, examples: &str, out: &str) {
    ok(&[
        "extract",
        "--model",
        &p(fx, "model.json"),
        "--examples",
        &p(dir, examples),
        "--out",
        &p(dir, out),
    ]);
}

#[test]
fn extract_and_layout_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let fx = prepared(dir);
    std::fs::copy(fx.join("test.examples"), dir.join("normal.examples")).unwrap();
    for run in ["a", "b"] {
        extract(dir, &fx, "normal.examples", &format!("normal-{run}.json"));
        extract(dir, &fx, "adv.examples", &format!("adv-{run}.json"));
        ok(&[
            "layout",
            "--model",
            &p(&fx, "model.json"),
            "--normal",
            &p(dir, "normal.examples"),
            "--adversarial",
            &p(dir, "adv.examples"),
            "--normal-datapath",
            &p(dir, &format!("normal-{run}.json")),
            "--adversarial-datapath",
            &p(dir, &format!("adv-{run}.json")),
            "--svg",
            "--out-dir",
            &p(dir, &format!("layout-{run}")),
        ]);
    }
    for f in ["normal", "adv"] {
        let a = std::fs::read(dir.join(format!("{f}-a.json"))).unwrap();
        let b = std::fs::read(dir.join(format!("{f}-b.json"))).unwrap();
        assert_eq!(a, b, "{f} datapath differs");
    }
    let mut names: Vec<_> = std::fs::read_dir(dir.join("layout-a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 3);
    for n in names {
        let a = std::fs::read(dir.join("layout-a").join(&n)).unwrap();
        let b = std::fs::read(dir.join("layout-b").join(&n)).unwrap();
        assert_eq!(a, b, "{n:?} differs");
    }
}

#[test]
fn stats_against_itself_is_fully_similar() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let fx = prepared(dir);
    extract(dir, &fx, "adv.examples", "adv.json");
    let adv = p(dir, "adv.examples");
    let dp = p(dir, "adv.json");
    ok(&[
        "stats",
        "--model",
        &p(&fx, "model.json"),
        "--normal",
        &adv,
        "--adversarial",
        &adv,
        "--normal-datapath",
        &dp,
        "--adversarial-datapath",
        &dp,
        "--out",
        &p(dir, "stats.json"),
    ]);
    let v: Value = serde_json::from_slice(&std::fs::read(dir.join("stats.json")).unwrap()).unwrap();
    let rows = v["statistics"].as_array().unwrap();
    let mut seen = 0;
    for r in rows {
        match r["kind"].as_str().unwrap() {
            "activation_similarity" | "topological_similarity" => {
                assert_eq!(r["value"].as_f64().unwrap(), 1.0, "{r}");
                seen += 1;
            }
            "activation_difference" => assert_eq!(r["value"].as_f64().unwrap(), 0.0),
            _ => {}
        }
    }
    assert!(seen > 0);
}

#[test]
fn discrepancy_writes_images() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let fx = prepared(dir);
    let out = dir.join("disc");
    ok(&[
        "discrepancy",
        "--model",
        &p(&fx, "model.json"),
        "--examples",
        &p(dir, "adv.examples"),
        "--image",
        "0",
        "--layer",
        "stem_relu",
        "--feature-map",
        "0",
        "--neuron",
        "8,8",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    let mask = std::fs::read(out.join("mask.pgm")).unwrap();
    assert!(mask.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(mask.len(), b"P5\n8 8\n255\n".len() + 64);
    assert!(std::fs::read(out.join("heatmap.ppm")).unwrap().starts_with(b"P6\n16 16\n255\n"));
    assert!(out.join("preview.pgm").exists());
}

fn single_line_error(args: &[&str]) -> Value {
    let out = datapath(args);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    let v: Value = serde_json::from_str(stderr.trim()).unwrap();
    assert!(v["error"]["message"].is_string());
    v
}

#[test]
fn failures_are_single_line_json() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = p(tmp.path(), "missing.json");
    assert_eq!(single_line_error(&["extract", "--model", &missing, "--examples", "x", "--out", "y"])["error"]["kind"], "io");
    assert_eq!(single_line_error(&["extract"])["error"]["kind"], "usage");
    assert_eq!(single_line_error(&["frobnicate"])["error"]["kind"], "usage");
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{}").unwrap();
    let v = single_line_error(&["extract", "--model", bad.to_str().unwrap(), "--examples", "x", "--out", "y"]);
    assert_eq!(v["error"]["kind"], "json");
}

#[test]
fn invalid_parameters_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let fx = prepared(dir);
    let v = single_line_error(&[
        "attack",
        "--model",
        &p(&fx, "model.json"),
        "--examples",
        &p(&fx, "test.examples"),
        "--epsilon=-0.5",
        "--out",
        &p(dir, "x.examples"),
    ]);
    assert_eq!(v["error"]["kind"], "invalid_argument");
    let v = single_line_error(&[
        "extract",
        "--model",
        &p(&fx, "model.json"),
        "--examples",
        &p(&fx, "test.examples"),
        "--threshold",
        "1.5",
        "--out",
        &p(dir, "x.json"),
    ]);
    assert_eq!(v["error"]["kind"], "invalid_argument");
}

#[test]
fn attack_raises_the_error_rate() {
    use datapath_core::attacks::error_rate;
    use datapath_core::nnet::io::{read_examples, read_model};
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let fx = prepared(dir);
    let model = read_model(&fx.join("model.json")).unwrap();
    let clean = read_examples(&fx.join("test.examples")).unwrap();
    let adv = read_examples(&dir.join("adv.examples")).unwrap();
    assert_eq!(clean.len(), adv.len());
    for (c, a) in clean.iter().zip(&adv) {
        assert_eq!(c.label, a.label);
        assert_eq!(a.group_tag, "adversarial");
        let linf = c.pixels.data.iter().zip(&a.pixels.data).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        // pixels are stored as f32
        assert!(linf <= 0.1 + 1e-6);
    }
    assert!(error_rate(&model, &adv).unwrap() > error_rate(&model, &clean).unwrap());
}
