//! End-to-end runs of the `s4ecg` binary on a small synthetic corpus.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn s4ecg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s4ecg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = s4ecg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn no_arguments_is_usage_error() {
    let out = s4ecg(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(out.stdout.is_empty());
}

#[test]
fn unknown_flag_and_subcommand_are_usage_errors() {
    for args in [&["train", "--seed", "1", "--bogus"][..], &["frobnicate"], &["synth", "--out", "x"]] {
        let out = s4ecg(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn help_exits_zero() {
    let out = s4ecg(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("evaluate"));
}

#[test]
fn epochs_in_sets_input_size() {
    let out = ok(&["train", "--dry-run", "--epochs-in", "30", "--seed", "0"]);
    assert!(out.lines().any(|l| l == "input_size 115200"), "{out}");
    let out = ok(&["train", "--dry-run", "--seed", "0"]);
    assert!(out.lines().any(|l| l == "input_size 38400"), "{out}");
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "input_epochs = 5\nlr = 0.002\nscale = 0.25\n").unwrap();
    let out_a = dir.path().join("a");
    let out = ok(&["train", "--dry-run", "--config", p(&cfg), "--seed", "3", "--out", p(&out_a)]);
    assert!(out.contains("input_size 19200"), "{out}");
    let out = ok(&["train", "--dry-run", "--config", p(&cfg), "--epochs-in", "2", "--set", "lr=0.01", "--seed", "3"]);
    assert!(out.contains("input_size 7680"), "{out}");
    assert!(out.contains("\"lr\": 0.01"), "{out}");
    let m = json(&out_a.join("run_manifest.json"));
    assert_eq!(m["config"]["lr"], 0.002);
    assert_eq!(m["seeds"]["seed"], 3);
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let bad = s4ecg(&["train", "--dry-run", "--config", p(&cfg), "--seed", "3"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn manifest_hash_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let m = dir.path().join(name);
        ok(&["train", "--dry-run", "--epochs-in", "10", "--seed", seed, "--manifest", p(&m)]);
        json(&m)
    };
    let (a, b, c) = (run("a.json", "1"), run("b.json", "1"), run("c.json", "2"));
    assert_eq!(a["config_hash"], b["config_hash"]);
    assert_ne!(a["config_hash"], c["config_hash"]);
    for key in ["command_line", "config", "seeds", "code_version", "wall_seconds", "outputs"] {
        assert!(a.get(key).is_some(), "manifest lacks {key}");
    }
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = s4ecg(&["preprocess", "--input", p(&dir.path().join("missing")), "--out", p(&dir.path().join("a"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = s4ecg(&["plot", "--band", p(&dir.path().join("none.csv")), "--out", p(&dir.path().join("x.svg"))]);
    assert_eq!(out.status.code(), Some(1));
}

/// synth -> preprocess -> split -> train (two models) -> evaluate -> predict -> plot -> compare.
#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let spec = d("spec.json");
    std::fs::write(
        &spec,
        r#"{"n_patients": 5, "record_minutes": 12, "sampling_rate": 250, "min_dwell_s": 60, "noise_mv": 0.05, "seed": 0,
            "classes": [
              {"class": "N", "mean_dwell_s": 150, "bpm": [60, 90], "rr_cv": 0.03, "amplitude_mv": 1.0, "width_s": 0.02},
              {"class": "AF", "mean_dwell_s": 150, "bpm": [90, 130], "rr_cv": 0.2, "amplitude_mv": 1.0, "width_s": 0.02}
            ]}"#,
    )
    .unwrap();
    ok(&["synth", "--spec", p(&spec), "--out", p(&d("wfdb")), "--seed", "4"]);
    assert!(d("wfdb/synth000.hea").exists() && d("wfdb/synth000.atr").exists());
    assert!(d("wfdb/run_manifest.json").exists());
    let out = ok(&["preprocess", "--input", p(&d("wfdb")), "--classes", "N,AF", "--out", p(&d("arch"))]);
    assert!(out.contains("5 records"), "{out}");
    ok(&["split", "--data", p(&d("arch")), "--ratios", "3,1,1", "--seed", "1"]);
    let manifest = json(&d("arch/manifest.json"));
    assert!(manifest.to_string().contains("synth"));

    let cfg = d("tiny.toml");
    std::fs::write(&cfg, "scale = 0.0625\nencoder_layers = 1\npredictor_layers = 1\nmicro_batch = 4\naccumulation = 1\nmax_epochs = 1\n").unwrap();
    for (n, out) in [("2", "m2"), ("1", "m1")] {
        ok(&["train", "--data", p(&d("arch")), "--config", p(&cfg), "--epochs-in", n, "--seed", "5", "--out", p(&d(out))]);
        assert!(d(out).join("best.ckpt").exists() && d(out).join("last.ckpt").exists());
        let log = std::fs::read_to_string(d(out).join("train_log.jsonl")).unwrap();
        let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for key in ["step", "loss", "lr", "val_macro_auroc"] {
            assert!(first.get(key).is_some(), "log record lacks {key}");
        }
    }

    let report = d("report.json");
    let out = ok(&[
        "evaluate", "--ckpt", p(&d("m2/best.ckpt")), "--data", p(&d("arch")), "--partition", "all", "--stride", "1",
        "--report", p(&report), "--bands", p(&d("bands")), "--bootstrap", "20", "--seed", "2",
    ]);
    assert!(out.contains("macro-AUROC "), "{out}");
    assert!(out.contains("AF specificity@0.9 sensitivity"), "{out}");
    let r = json(&report);
    assert_eq!(r["classes"], serde_json::json!(["N", "AF"]));
    assert_eq!(r["af_burden"].as_array().unwrap().len(), 5);
    assert!(r["macro_auroc_ci"]["n_iter"].as_u64() == Some(20));
    assert!(d("report.json.manifest.json").exists());
    let boot = s4ecg(&["evaluate", "--ckpt", p(&d("m2/best.ckpt")), "--data", p(&d("arch")), "--report", p(&report), "--bootstrap", "5"]);
    assert_eq!(boot.status.code(), Some(2));

    let csv = d("pred.csv");
    ok(&["predict", "--ckpt", p(&d("m2/best.ckpt")), "--input", p(&d("wfdb")), "--out", p(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("record,epoch,p_N,p_AF\n"));
    assert_eq!(text.lines().count(), 1 + 5 * 24);

    let svg = d("band.svg");
    let out = ok(&["plot", "--band", p(&d("bands/synth000.csv")), "--out", p(&svg)]);
    assert!(out.contains("reference:") && out.contains("model:"), "{out}");
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let cmp = d("cmp.json");
    let run_compare = || {
        ok(&[
            "compare", "--ckpt-a", p(&d("m2/best.ckpt")), "--ckpt-b", p(&d("m1/best.ckpt")), "--data", p(&d("arch")),
            "--partition", "all", "--iters", "50", "--seed", "9", "--report", p(&cmp),
        ]);
        json(&cmp)
    };
    let (c1, c2) = (run_compare(), run_compare());
    assert_eq!(c1, c2);
    assert_eq!(c1["a"]["input_epochs"], 2);
    assert_eq!(c1["difference"]["ci"]["n_iter"], 50);
}
