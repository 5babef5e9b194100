use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lungseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lungseg"))
        .current_dir(dir)
        .env_remove("LUNGSEG_MAX_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lungseg(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Synthetic PNG dataset with a split manifest at `data/manifest.json`.
fn dataset(patients: &str) -> TempDir {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out-dir", "data", "--patients", patients, "--nodule-slices", "2", "--blank-slices", "2", "--size", "16"]);
    ok(d, &["manifest", "data"]);
    ok(d, &["split", "data/manifest.json", "--ratios", "0.6,0.2,0.2", "--seed", "1"]);
    tmp
}

#[test]
fn split_is_byte_identical_for_same_seed() {
    let tmp = dataset("10");
    let d = tmp.path();
    ok(d, &["split", "data/manifest.json", "--seed", "9", "--out", "a.json"]);
    ok(d, &["split", "data/manifest.json", "--seed", "9", "--out", "b.json"]);
    ok(d, &["split", "data/manifest.json", "--seed", "10", "--out", "c.json"]);
    let a = fs::read(d.join("a.json")).unwrap();
    assert_eq!(a, fs::read(d.join("b.json")).unwrap());
    assert_ne!(a, fs::read(d.join("c.json")).unwrap());
}

#[test]
fn oracle_eval_scores_one() {
    let tmp = dataset("10");
    let d = tmp.path();
    let stdout = ok(d, &["eval", "data/manifest.json", "--oracle", "--out-dir", "ev"]);
    assert!(stdout.contains("mean_dice = 1.000000"), "{stdout}");
    assert!(stdout.contains("mean_iou = 1.000000"), "{stdout}");
    assert!(stdout.contains("without_nodule = "), "{stdout}");
    let csv = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert!(csv.starts_with("sample_id,has_nodule,dice,iou,tp,fp,fn,tn\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
}

#[test]
fn empty_predictor_scores_zero_on_nodules() {
    let tmp = dataset("10");
    let out = ok(tmp.path(), &["eval", "data/manifest.json", "--empty", "--split", "train"]);
    // half the slices have nodules (Dice 0), half are empty-on-empty (Dice 1)
    assert!(out.contains("mean_dice = 0.500000"), "{out}");
}

#[test]
fn train_writes_one_history_row_per_epoch() {
    let tmp = dataset("5");
    let d = tmp.path();
    let args = ["train", "data/manifest.json", "--out-dir", "run", "--epochs", "50", "--levels", "2", "--base-channels", "2", "--batch-size", "2"];
    ok(d, &args);
    let csv = fs::read_to_string(d.join("run/history.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,val_loss,seconds"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 50);
    assert!(rows[49].starts_with("49,"));
    for name in ["best.ckpt", "final.ckpt", "history.jsonl"] {
        assert!(d.join("run").join(name).is_file(), "{name} missing");
    }
    let stdout = ok(d, &["eval", "data/manifest.json", "--checkpoint", "run/best.ckpt", "--split", "val"]);
    assert!(stdout.contains("images = 4"), "{stdout}");

    ok(d, &["finetune", "data/manifest.json", "--checkpoint", "run/best.ckpt", "--out-dir", "ft", "--finetune-epochs", "2", "--batch-size", "2"]);
    let ft = fs::read_to_string(d.join("ft/finetune_history.csv")).unwrap();
    assert_eq!(ft.lines().count(), 3);
    assert!(d.join("ft/final.ckpt").is_file());
}

#[test]
fn flags_override_config_file() {
    let tmp = dataset("5");
    let d = tmp.path();
    fs::write(d.join("cfg.toml"), "[train]\nepochs = 2\nbatch_size = 2\n[model]\nlevels = 2\nbase_channels = 2\n").unwrap();
    ok(d, &["--config", "cfg.toml", "train", "data/manifest.json", "--out-dir", "a"]);
    ok(d, &["--config", "cfg.toml", "train", "data/manifest.json", "--out-dir", "b", "--epochs", "3"]);
    assert_eq!(fs::read_to_string(d.join("a/history.csv")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_to_string(d.join("b/history.csv")).unwrap().lines().count(), 4);
}

#[test]
fn dicom_ingest_round_trip() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out-dir", "raw", "--patients", "3", "--nodule-slices", "1", "--blank-slices", "1", "--size", "16", "--dicom"]);
    let stdout = ok(d, &["ingest", "raw", "png"]);
    assert!(stdout.contains("ingested 6 slices (3 masks"), "{stdout}");
    assert!(d.join("png/slices.jsonl").is_file());
    ok(d, &["manifest", "png"]);
    ok(d, &["split", "png/manifest.json", "--ratios", "0.34,0.33,0.33"]);
    let out = ok(d, &["eval", "png/manifest.json", "--oracle", "--split", "train"]);
    assert!(out.contains("mean_dice = 1.000000"), "{out}");
}

#[test]
fn usage_errors_exit_2() {
    let tmp = dataset("5");
    let d = tmp.path();
    fs::create_dir(d.join("empty")).unwrap();
    fs::write(d.join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    let cases: &[&[&str]] = &[
        &["ingest", "empty", "out", "--window-width", "0"],
        &["split", "data/manifest.json", "--ratios", "0.5,0.5"],
        &["split", "data/manifest.json", "--ratios", "0.5,0.4,0.4"],
        &["eval", "data/manifest.json"],
        &["eval", "data/manifest.json", "--oracle", "--threshold", "1.5"],
        &["--config", "bad.toml", "stats", "data/manifest.json"],
        &["train", "data/manifest.json", "--out-dir", "x", "--epochs", "0"],
        &["no-such-command"],
    ];
    for args in cases {
        let out = lungseg(d, args);
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = dataset("5");
    let d = tmp.path();
    fs::create_dir(d.join("empty")).unwrap();
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = lungseg(d, &["ingest", "empty", "out"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no samples found"));
    for args in [&["stats", "missing.json"][..], &["eval", "data/manifest.json", "--checkpoint", "junk.ckpt"]] {
        assert_eq!(code(&lungseg(d, args)), 1, "{args:?}");
    }
}

#[test]
fn thread_cap_bounds_sweep_workers() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let sweep = ["bench-sweep", "--synthetic", "12", "--workers", "1,3", "--queue-ratios", "2", "--epochs-per-cell", "1", "--batch-size", "4", "--size", "16"];
    let run = |cap: &str| Command::new(env!("CARGO_BIN_EXE_lungseg")).current_dir(d).env("LUNGSEG_MAX_THREADS", cap).args(sweep).output().unwrap();
    assert_eq!(code(&run("2")), 2);
    assert_eq!(code(&run("zero")), 2);
    let out = run("4");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("workers,queue_ratio,"), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.ends_with(",12")).count(), 2, "{stdout}");
}

#[test]
fn gradcheck_passes() {
    let tmp = TempDir::new().unwrap();
    let stdout = ok(tmp.path(), &["gradcheck"]);
    assert!(stdout.contains("gradient checks passed"), "{stdout}");
}
