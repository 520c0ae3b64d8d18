//! End-to-end tests of the `dfq` binary.

use std::path::Path;
use std::process::{Command, Output};

fn dfq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfq"))
        .arg("--dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Tiny-but-complete schedule so the smoke pipeline stays fast.
const FAST: &[&str] = &[
    "--dataset.samples-per-class",
    "50",
    "--teacher.epochs",
    "2",
    "--schedule.total-epochs",
    "2",
    "--schedule.warmup-epochs",
    "1",
    "--schedule.steps-per-epoch",
    "2",
    "--schedule.batch-size",
    "20",
    "--schedule.init-batches",
    "1",
];

#[test]
fn full_smoke_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = dfq(dir, &[&["gen-data"], FAST].concat());
    assert_ok(&out, "gen-data");
    assert!(dir.join("train.dat").exists());
    assert!(dir.join("test.dat").exists());

    let out = dfq(dir, &[&["train-teacher"], FAST].concat());
    assert_ok(&out, "train-teacher");
    assert!(dir.join("teacher.ckpt").exists());

    let out = dfq(dir, &[&["dfq-run"], FAST].concat());
    assert_ok(&out, "dfq-run");
    for f in ["student.ckpt", "metrics.csv", "report.json", "synthetic_grid.png"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }

    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(
        "epoch,step,l_ce,l_bns,l_fda,l_de,l_kd,student_acc,fisher_ratio,diversity"
    ));

    let out = dfq(dir, &[&["eval"], FAST].concat());
    assert_ok(&out, "eval");
    assert!(String::from_utf8_lossy(&out.stdout).contains("test accuracy"));

    // report verifies hashes and is idempotent (no training involved)
    let out = dfq(dir, &[&["report"], FAST].concat());
    assert_ok(&out, "report");
    let out2 = dfq(dir, &[&["report"], FAST].concat());
    assert_ok(&out2, "report twice");

    // the manifest lists every artifact with a hash
    let manifest = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    for f in ["train.dat", "teacher.ckpt", "student.ckpt", "metrics.csv"] {
        assert!(manifest.contains(f), "{f} not in manifest");
    }
    assert!(manifest.contains("sha256"));
}

#[test]
fn eval_missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_ok(&dfq(dir, &[&["gen-data"], FAST].concat()), "gen-data");
    let out = dfq(dir, &[&["eval"], FAST].concat());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("student.ckpt"), "stderr: {err}");
}

#[test]
fn ablate_emits_four_row_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_ok(&dfq(dir, &[&["gen-data"], FAST].concat()), "gen-data");
    assert_ok(&dfq(dir, &[&["train-teacher"], FAST].concat()), "train-teacher");
    let out = dfq(dir, &[&["ablate"], FAST].concat());
    assert_ok(&out, "ablate");
    let csv = std::fs::read_to_string(dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5, "header + 4 variants: {csv}");
    for name in ["full", "no_DE", "no_EMA", "neither"] {
        assert!(csv.contains(name), "{name} missing from table");
    }
}

#[test]
fn invalid_config_lists_all_offenders() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = dfq(
        dir,
        &["gen-data", "--beta-fd", "1.5", "--quant.weight-bits", "40"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("beta_fd"), "stderr: {err}");
    assert!(err.contains("quant.weight_bits"), "stderr: {err}");
}

#[test]
fn root_seed_env_override_changes_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = Command::new(env!("CARGO_BIN_EXE_dfq"))
        .arg("--dir")
        .arg(dir)
        .args([&["gen-data"], FAST].concat())
        .env("DFQ_ROOT_SEED", "7")
        .output()
        .unwrap();
    assert_ok(&out, "gen-data with env seed");
    let manifest = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"root_seed\": 7"), "{manifest}");
}

#[test]
fn quantize_without_teacher_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_ok(&dfq(dir, &[&["gen-data"], FAST].concat()), "gen-data");
    let out = dfq(dir, &[&["quantize"], FAST].concat());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("teacher.ckpt"));
}

#[test]
fn sweep_single_value_single_repeat() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_ok(&dfq(dir, &[&["gen-data"], FAST].concat()), "gen-data");
    assert_ok(&dfq(dir, &[&["train-teacher"], FAST].concat()), "train-teacher");
    let out = dfq(
        dir,
        &[
            &["sweep", "--param", "beta_fd", "--values", "0.2", "--repeats", "1"],
            FAST,
        ]
        .concat(),
    );
    assert_ok(&out, "sweep");
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "header + one row: {csv}");
    assert!(dir.join("sweep.png").exists());
}
