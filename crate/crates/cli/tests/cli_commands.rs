//! End-to-end behaviour of the `advpatch` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn advpatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advpatch"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = advpatch(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(dir: &Path, count: &str) -> String {
    ok(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        count,
        "--guide-size",
        "16",
    ]);
    dir.join("run.toml").to_str().unwrap().to_string()
}

#[test]
fn eval_without_patch_is_the_clean_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), "6");
    ok(&["eval", "--config", &cfg]);
    let csv = fs::read_to_string(dir.path().join("run/reports/eval.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| {
        row[header.iter().position(|h| *h == name).unwrap()]
            .parse::<f64>()
            .unwrap()
    };
    assert_eq!(col("map_50"), 100.0);
    assert_eq!(col("recall"), 100.0);
    assert!(dir.path().join("run/reports/detections.txt").exists());
}

#[test]
fn export_patch_sizes_follow_dpi() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1");
    let out = dir.path().join("print.png");
    let guide = dir.path().join("guide.png");
    ok(&[
        "export-patch",
        "--patch",
        guide.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--dpi",
        "150",
    ]);
    let (w, h) = image::image_dimensions(&out).unwrap();
    assert_eq!(
        (w, h),
        (
            (20.5f64 / 2.54 * 150.0).round() as u32,
            (21.5f64 / 2.54 * 150.0).round() as u32
        )
    );
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), "1");

    assert_eq!(
        advpatch(&["attack", "--config", &cfg, "--bogus-flag"]).status.code(),
        Some(2)
    );
    assert_eq!(advpatch(&["no-such-command"]).status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("[attack]", "[attack]\nlearning_rate = 1.0");
    fs::write(&bad, text).unwrap();
    let out = advpatch(&["attack", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let missing = dir.path().join("missing.toml");
    let text = fs::read_to_string(&cfg).unwrap().replace("guide.png", "nope.png");
    fs::write(&missing, text).unwrap();
    assert_eq!(
        advpatch(&["eval", "--config", missing.to_str().unwrap()]).status.code(),
        Some(3)
    );

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"ADVPATCH-CKPT 1\n\x05").unwrap();
    let out = advpatch(&["attack", "--config", &cfg, "--resume", junk.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(7));
}

#[test]
fn attack_writes_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), "2");
    ok(&["attack", "--config", &cfg, "--epochs", "1", "--batch-size", "2"]);
    let run = dir.path().join("run");
    for f in [
        "patch.png",
        "patch.ckpt",
        "loss_log.csv",
        "manifest.json",
        "effective_config.toml",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,step,l_det,l_sim,l_tv,l_total");
    assert_eq!(log.lines().count(), 2);
    let eff = fs::read_to_string(run.join("effective_config.toml")).unwrap();
    assert!(eff.contains("batch_size = 2"), "{eff}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);

    let patch = run.join("patch.ckpt");
    ok(&[
        "render-preview",
        "--config",
        &cfg,
        "--patch",
        patch.to_str().unwrap(),
        "--count",
        "2",
    ]);
    assert!(run.join("previews/preview_000.png").exists());
}
