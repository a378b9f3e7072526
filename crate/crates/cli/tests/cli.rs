//! End-to-end tests of the `tinydistill` binary: exit codes, artifacts,
//! determinism, and the machine-readable stdout contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tinydistill"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn binary")
}

fn small_config(dir: &Path, seed: u64, epochs: usize) -> serde_json::Value {
    serde_json::json!({
        "network": {"layers": [
            {"kind": "conv2d", "in_channels": 3, "out_channels": 4, "kernel": 3, "stride": 1, "padding": 1},
            {"kind": "batch_norm2d", "channels": 4},
            {"kind": "relu"},
            {"kind": "conv2d", "in_channels": 4, "out_channels": 6, "kernel": 3, "stride": 2, "padding": 1},
            {"kind": "batch_norm2d", "channels": 6},
            {"kind": "relu"},
            {"kind": "global_avg_pool"},
            {"kind": "dense", "in_channels": 6, "out_channels": 3}
        ]},
        "train": {
            "epochs": epochs, "batch_size": 16, "base_lr": 0.05, "warmup_epochs": 0,
            "expansion_rate": 2, "seed": seed
        },
        "dataset": {"synthetic": {
            "classes": 3, "per_class": 16, "image_size": 8,
            "seed": 11, "eval_per_class": 8, "eval_seed": 12
        }},
        "output_dir": dir.join("out")
    })
}

fn write_config(dir: &Path, value: &serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path
}

#[test]
fn missing_config_exits_2() {
    let out = run(&["train", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 1, 1);
    cfg["mystery"] = serde_json::json!(1);
    let path = write_config(dir.path(), &cfg);
    let out = run(&["train", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn train_writes_three_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &small_config(dir.path(), 1, 1));
    let out = run(&["train", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(out.stdout.is_empty(), "train keeps stdout clean");
    let out_dir = dir.path().join("out");
    for artifact in ["metrics.jsonl", "final.ckpt", "student_export.ckpt"] {
        assert!(out_dir.join(artifact).exists(), "{artifact} missing");
    }
}

#[test]
fn metrics_lines_use_the_fixed_key_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &small_config(dir.path(), 2, 2));
    let out = run(&["train", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let metrics = fs::read_to_string(dir.path().join("out/metrics.jsonl")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, line) in lines.iter().enumerate() {
        assert!(
            line.starts_with(&format!("{{\"epoch\":{i},\"lr\":")),
            "line {i}: {line}"
        );
        let keys: Vec<&str> = line
            .split('"')
            .skip(1)
            .step_by(2)
            .take_while(|_| true)
            .collect();
        assert_eq!(
            keys,
            vec![
                "epoch",
                "lr",
                "loss_teacher",
                "loss_student",
                "acc_student_eval",
                "acc_teacher_eval",
                "conflict_ratio",
                "kl_fraction",
                "seconds"
            ]
        );
    }
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 3, 2);
    cfg["output_dir"] = serde_json::json!(dir.path().join("a"));
    let path = write_config(dir.path(), &cfg);
    assert_eq!(run(&["train", path.to_str().unwrap()]).status.code(), Some(0));

    cfg["output_dir"] = serde_json::json!(dir.path().join("b"));
    let path = write_config(dir.path(), &cfg);
    assert_eq!(run(&["train", path.to_str().unwrap()]).status.code(), Some(0));

    let a = fs::read(dir.path().join("a/student_export.ckpt")).unwrap();
    let b = fs::read(dir.path().join("b/student_export.ckpt")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "student exports differ between identical runs");
    let fa = fs::read(dir.path().join("a/final.ckpt")).unwrap();
    let fb = fs::read(dir.path().join("b/final.ckpt")).unwrap();
    assert_eq!(fa, fb, "final checkpoints differ between identical runs");
}

#[test]
fn eval_matches_last_metrics_record_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &small_config(dir.path(), 4, 2));
    assert_eq!(run(&["train", path.to_str().unwrap()]).status.code(), Some(0));

    let metrics = fs::read_to_string(dir.path().join("out/metrics.jsonl")).unwrap();
    let last: serde_json::Value =
        serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    let recorded = last["acc_student_eval"].as_f64().unwrap();

    // The eval dataset of the run above.
    let export = dir.path().join("out/student_export.ckpt");
    let out = run(&[
        "eval",
        export.to_str().unwrap(),
        "--synthetic",
        "classes=3,per_class=8,size=8,seed=11,noise_seed=12",
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let parsed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let accuracy = parsed["accuracy"].as_f64().unwrap();
    assert_eq!(parsed["n"].as_u64().unwrap(), 24);
    assert!(
        (accuracy - recorded).abs() < 1e-12,
        "eval {accuracy} vs recorded {recorded}"
    );
}

#[test]
fn eval_views_select_teacher_or_student() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &small_config(dir.path(), 5, 1));
    assert_eq!(run(&["train", path.to_str().unwrap()]).status.code(), Some(0));
    let ckpt = dir.path().join("out/final.ckpt");
    let data = "classes=3,per_class=8,size=8,seed=11,noise_seed=12";
    let student = run(&["eval", ckpt.to_str().unwrap(), "--synthetic", data, "--view", "student"]);
    let teacher = run(&["eval", ckpt.to_str().unwrap(), "--synthetic", data, "--view", "teacher"]);
    assert_eq!(student.status.code(), Some(0));
    assert_eq!(teacher.status.code(), Some(0));
    // A standalone export has no teacher view.
    let export = dir.path().join("out/student_export.ckpt");
    let bad = run(&["eval", export.to_str().unwrap(), "--synthetic", data, "--view", "teacher"]);
    assert_eq!(bad.status.code(), Some(2), "{bad:?}");
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("broken.ckpt");
    fs::write(&ckpt, b"{ not json").unwrap();
    let out = run(&[
        "eval",
        ckpt.to_str().unwrap(),
        "--synthetic",
        "classes=3,per_class=4,size=8,seed=1",
    ]);
    assert_eq!(out.status.code(), Some(4), "{out:?}");

    let missing = run(&[
        "eval",
        dir.path().join("nope.ckpt").to_str().unwrap(),
        "--synthetic",
        "classes=3,per_class=4,size=8,seed=1",
    ]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn sweep_produces_one_cell_per_grid_value() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &small_config(dir.path(), 6, 1));
    let out = run(&["sweep", path.to_str().unwrap(), "--grid", "k=1,2"]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let base = dir.path().join("out");
    assert!(base.join("cell-k-1/student_export.ckpt").exists());
    assert!(base.join("cell-k-2/student_export.ckpt").exists());
    let csv = fs::read_to_string(base.join("summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis,value,status,acc_student_eval");
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[1].starts_with("k,1,ok,"));
    assert!(lines[2].starts_with("k,2,ok,"));
}

#[test]
fn sweep_over_thresholds_records_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 7, 1);
    cfg["train"]["student_loss"] =
        serde_json::json!({"mode": "uncertainty", "threshold": 1.0, "space": "normalized"});
    let path = write_config(dir.path(), &cfg);
    // A negative threshold fails config validation inside its cell only.
    let out = run(&["sweep", path.to_str().unwrap(), "--grid", "T=0.5,-1.0"]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let csv = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert!(csv.contains("T,0.5,ok,"), "{csv}");
    assert!(csv.contains("T,-1.0,error,"), "{csv}");
}

#[test]
fn analyze_conflicts_reports_every_shared_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &small_config(dir.path(), 8, 1));
    assert_eq!(run(&["train", path.to_str().unwrap()]).status.code(), Some(0));
    let ckpt = dir.path().join("out/final.ckpt");
    let out = run(&[
        "analyze-conflicts",
        ckpt.to_str().unwrap(),
        "--steps",
        "2",
        "--synthetic",
        "classes=3,per_class=16,size=8,seed=11",
        "--batch-size",
        "16",
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["steps"], 2);
    let ratio = report["aggregate_conflict_ratio"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ratio));
    // Two conv layers and one dense layer, weight + bias each.
    assert_eq!(report["layers"].as_array().unwrap().len(), 6);
    for layer in report["layers"].as_array().unwrap() {
        assert_eq!(layer["cosines"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn gen_data_round_trips_through_idx() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("toy");
    let out = run(&[
        "gen-data",
        "--classes",
        "3",
        "--per-class",
        "5",
        "--size",
        "8",
        "--seed",
        "21",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let manifest: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(manifest["n"], 15);
    let images = PathBuf::from(manifest["images"].as_str().unwrap());
    let labels = PathBuf::from(manifest["labels"].as_str().unwrap());
    assert!(images.exists() && labels.exists());

    // The generated pair drives training through the IDX path.
    let mut cfg = small_config(dir.path(), 9, 1);
    cfg["dataset"] = serde_json::json!({"idx": {
        "train_images": images, "train_labels": labels,
        "eval_images": images, "eval_labels": labels
    }});
    let path = write_config(dir.path(), &cfg);
    let out = run(&["train", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
}

#[test]
fn three_arm_comparison_emits_one_metrics_file_per_arm() {
    let dir = tempfile::tempdir().unwrap();
    // A frozen teacher for the standard-KD arm.
    let mut teacher_cfg = small_config(dir.path(), 42, 1);
    teacher_cfg["mode"] = serde_json::json!("baseline");
    teacher_cfg["output_dir"] = serde_json::json!(dir.path().join("teacher"));
    let path = write_config(dir.path(), &teacher_cfg);
    assert_eq!(run(&["train", path.to_str().unwrap()]).status.code(), Some(0));

    for mode in ["distilled", "baseline", "standard_kd"] {
        let mut cfg = small_config(dir.path(), 42, 1);
        cfg["mode"] = serde_json::json!(mode);
        cfg["output_dir"] = serde_json::json!(dir.path().join(mode));
        if mode == "standard_kd" {
            cfg["train"]["student_loss"] = serde_json::json!({"mode": "always_ce"});
            cfg["train"]["external_kd"] = serde_json::json!({
                "teacher_checkpoint": dir.path().join("teacher/student_export.ckpt")
            });
        }
        let path = write_config(dir.path(), &cfg);
        let out = run(&["train", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{mode}: {out:?}");
        let metrics = fs::read_to_string(dir.path().join(mode).join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 1, "{mode}");
    }
}

#[test]
fn baseline_and_standard_kd_modes_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 10, 1);
    cfg["mode"] = serde_json::json!("baseline");
    cfg["output_dir"] = serde_json::json!(dir.path().join("baseline"));
    let path = write_config(dir.path(), &cfg);
    assert_eq!(run(&["train", path.to_str().unwrap()]).status.code(), Some(0));
    let metrics = fs::read_to_string(dir.path().join("baseline/metrics.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert!(line["loss_teacher"].is_null());
    assert!(line["conflict_ratio"].is_null());

    // Standard KD against the baseline's own export as the frozen teacher.
    let mut kd = small_config(dir.path(), 10, 1);
    kd["mode"] = serde_json::json!("standard_kd");
    kd["train"]["student_loss"] = serde_json::json!({"mode": "always_ce"});
    kd["train"]["external_kd"] = serde_json::json!({
        "teacher_checkpoint": dir.path().join("baseline/student_export.ckpt")
    });
    kd["output_dir"] = serde_json::json!(dir.path().join("kd"));
    let path = write_config(dir.path(), &kd);
    let out = run(&["train", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(dir.path().join("kd/student_export.ckpt").exists());
}
