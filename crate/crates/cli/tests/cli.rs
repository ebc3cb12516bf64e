use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "count": 20,
  "image_size": 32,
  "labeled_ratio": 0.1,
  "widths": [4, 4, 4],
  "groups": 2,
  "warmup_epochs": 2,
  "epochs": 2,
  "batch_size": 4
}"#;

fn pseudoseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pseudoseg"))
        .args(args)
        .current_dir(dir)
        .env_remove("PSEUDOSEG_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pseudoseg(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(dir: &Path, args: &[&str]) -> String {
    let out = pseudoseg(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn small_project() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), SMALL).unwrap();
    dir
}

fn read(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn missing_artifacts_name_their_producer() {
    let dir = small_project();
    let d = dir.path();
    let e = err(d, &["appg", "--config", "run.json"]);
    assert!(e.contains("dataset.json") && e.contains("pseudoseg synth"), "{e}");
    assert_eq!(e.trim().lines().count(), 1);

    ok(d, &["synth", "--config", "run.json"]);
    let e = err(d, &["filter", "--config", "run.json"]);
    assert!(e.contains("manifest.json") && e.contains("pseudoseg appg"), "{e}");
    let e = err(d, &["warmup", "--config", "run.json"]);
    assert!(e.contains("splits.json") && e.contains("pseudoseg appg"), "{e}");
    ok(d, &["appg", "--config", "run.json"]);
    let e = err(d, &["warmup", "--config", "run.json"]);
    assert!(e.contains("valid.json") && e.contains("pseudoseg filter"), "{e}");
    let e = err(d, &["train", "--config", "run.json"]);
    assert!(e.contains("teacher.ckpt") && e.contains("pseudoseg warmup"), "{e}");
    let e = err(d, &["eval", "--config", "run.json"]);
    assert!(e.contains("best.ckpt") && e.contains("pseudoseg train"), "{e}");
    let e = err(d, &["train", "--config", "run.json", "--resume"]);
    assert!(e.contains("last.ckpt"), "{e}");
}

#[test]
fn config_errors_are_reported() {
    let dir = small_project();
    let d = dir.path();
    let e = err(d, &["synth", "--config", "run.json", "--set", "colour=3"]);
    assert!(e.contains("unknown field `colour`"), "{e}");
    let e = err(d, &["synth", "--config", "run.json", "--image-size", "16"]);
    assert!(e.contains("image_size"), "{e}");
    let e = err(d, &["synth", "--config", "absent.json"]);
    assert!(e.contains("absent.json"), "{e}");
    ok(d, &["synth", "--config", "run.json"]);
    let e = err(d, &["appg", "--config", "run.json", "--backend", "live"]);
    assert!(e.contains("--backend replay"), "{e}");
}

#[test]
fn pipeline_runs_and_reruns_identically() {
    let dir = small_project();
    let d = dir.path();
    ok(d, &["synth", "--config", "run.json"]);
    let first = std::fs::read(d.join("data/images/case_0007.png")).unwrap();
    ok(d, &["synth", "--config", "run.json"]);
    assert_eq!(first, std::fs::read(d.join("data/images/case_0007.png")).unwrap());

    let out = ok(d, &["appg", "--config", "run.json"]);
    assert!(out.starts_with("appg: "), "{out}");
    let splits = read(&d.join("cache/splits.json"));
    assert_eq!(splits["labeled_ids"].as_array().unwrap().len(), 2);
    assert_eq!(splits["val_ids"].as_array().unwrap().len(), 2);
    ok(d, &["filter", "--config", "run.json"]);
    ok(d, &["warmup", "--config", "run.json"]);
    ok(d, &["train", "--config", "run.json"]);
    let metrics = std::fs::read_to_string(d.join("runs/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        for key in [
            "epoch", "l_s", "l_u", "l_c", "total", "val_dice", "val_iou", "val_acc", "lr",
        ] {
            assert!(rec.get(key).is_some(), "missing {key}");
        }
    }

    ok(d, &["eval", "--config", "run.json"]);
    let a = std::fs::read(d.join("runs/eval.best.test.json")).unwrap();
    ok(d, &["eval", "--config", "run.json"]);
    assert_eq!(a, std::fs::read(d.join("runs/eval.best.test.json")).unwrap());
    let report = read(&d.join("runs/eval.best.test.json"));
    assert_eq!(report["metrics"]["n_images"], 2);

    ok(
        d,
        &[
            "eval",
            "--config",
            "run.json",
            "--checkpoint",
            "teacher",
            "--split",
            "val",
        ],
    );
    assert!(d.join("runs/eval.teacher.val.json").exists());
    ok(d, &["overlay", "--config", "run.json"]);
    assert_eq!(std::fs::read_dir(d.join("runs/overlays")).unwrap().count(), 2);

    // extending a finished run continues from last.ckpt
    ok(d, &["train", "--config", "run.json", "--epochs", "3", "--resume"]);
    let extended = std::fs::read_to_string(d.join("runs/metrics.jsonl")).unwrap();
    assert_eq!(extended.lines().count(), 3);
    assert!(extended.starts_with(&metrics));
}

#[test]
fn flags_and_environment_override_the_file() {
    let dir = small_project();
    let d = dir.path();
    ok(
        d,
        &["synth", "--config", "run.json", "--count", "12", "--data-dir", "other"],
    );
    let resolved = read(&d.join("other/resolved_config.synth.json"));
    assert_eq!(resolved["count"], 12);
    assert_eq!(resolved["image_size"], 32);
    assert_eq!(read(&d.join("other/dataset.json"))["ids"].as_array().unwrap().len(), 12);

    let out = Command::new(env!("CARGO_BIN_EXE_pseudoseg"))
        .args(["synth", "--config", "run.json", "--data-dir", "seeded"])
        .current_dir(d)
        .env("PSEUDOSEG_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(&d.join("seeded/resolved_config.synth.json"))["seed"], 9);
    let out = Command::new(env!("CARGO_BIN_EXE_pseudoseg"))
        .args(["synth", "--config", "run.json", "--data-dir", "flagged", "--seed", "4"])
        .current_dir(d)
        .env("PSEUDOSEG_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(&d.join("flagged/resolved_config.synth.json"))["seed"], 4);
    assert_ne!(
        std::fs::read(d.join("seeded/images/case_0000.png")).unwrap(),
        std::fs::read(d.join("flagged/images/case_0000.png")).unwrap()
    );
}

#[test]
fn supervised_only_ignores_the_pseudo_label_cache() {
    let dir = small_project();
    let d = dir.path();
    ok(d, &["synth", "--config", "run.json"]);
    let out = ok(d, &["train", "--config", "run.json", "--supervised-only"]);
    assert!(out.contains("0 unlabeled"), "{out}");
    let summary = read(&d.join("runs/train.json"));
    assert_eq!(summary["supervised_only"], true);
    // same number of steps the full pipeline would take on 14 unlabeled images with B = 4
    assert_eq!(summary["steps_per_epoch"], 7);
    let metrics = std::fs::read_to_string(d.join("runs/metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["l_u"], 0.0);
        assert_eq!(rec["l_c"], 0.0);
    }
}
