//! The `nowcast` binary end to end on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
frame_h = 8
frame_w = 8
blocks = "2x3"
strict_arch = false
epochs = 1
synth_sequences = 2
"#;

fn nowcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nowcast(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_with_a_seed_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "a", "--seed", "7", "--sequences", "2"]);
    ok(dir.path(), &["synth", "--out", "b", "--seed", "7", "--sequences", "2"]);
    let a = tree(&dir.path().join("a"));
    assert_eq!(a.len(), 1 + 2 * 36);
    assert_eq!(a, tree(&dir.path().join("b")));
}

#[test]
fn train_eval_predict_render_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), TINY).unwrap();
    fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
        [&["--config", "run.toml"][..], extra].concat()
    }

    ok(d, &with(&["synth", "--out", "data"]));
    let log = ok(d, &with(&["train"]));
    assert!(log.contains("epoch   1"), "{log}");
    assert!(d.join("model.nckp").is_file());

    ok(d, &with(&["eval", "--json", "eval.json"]));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("eval.json")).unwrap()).unwrap();
    let leads = report["rmse_per_leadtime"].as_array().unwrap();
    assert_eq!(leads.len(), 18);
    assert!(leads.iter().all(|v| v.as_f64().unwrap() >= 0.0));
    let overall = report["rmse_overall"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&overall));
    assert_eq!(report["n_samples"], 2);
    assert!(report["rmse_mean_per_sample"].is_f64());
    assert_eq!(report["config_fingerprint"].as_str().unwrap().len(), 64);

    ok(d, &with(&["predict", "--out", "pred"]));
    let preds = tree(&d.join("pred"));
    assert_eq!(preds.len(), 2 * 18);

    ok(d, &with(&["render", "--out", "fig"]));
    let figs = tree(&d.join("fig"));
    assert_eq!(figs.iter().filter(|(n, _)| n.starts_with("panel_")).count(), 18);
    assert!(figs.iter().any(|(n, _)| n == "comparison.gif"));
    assert!(figs.iter().any(|(n, _)| n == "strip.png"));

    let log = ok(d, &with(&["train", "--resume", "--epochs", "2"]));
    assert!(log.contains("epoch   2") && !log.contains("epoch   1"), "{log}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nowcast(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = nowcast(dir.path(), &["eval", "--persistence", "--data", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains("missing"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "epochz = 3\n").unwrap();
    let out = nowcast(dir.path(), &["--config", "bad.toml", "synth", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}
