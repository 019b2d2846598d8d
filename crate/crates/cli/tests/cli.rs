use std::path::Path;
use std::process::{Command, Output};

fn dualsamp(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dualsamp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dualsamp");
    out
}

fn ok(args: &[&str]) -> String {
    let out = dualsamp(args);
    assert!(
        out.status.success(),
        "dualsamp {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let stdout = ok(&["gen-data", "--n-covid", "2", "--n-cap", "2", "--seed", "3", "--shape", "32,32,32", "--out", s(&data)]);
    assert!(stdout.contains("wrote 4 phantoms"), "{stdout}");
    let manifest = data.join("manifest.jsonl");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 4);

    let cache = root.join("cache");
    ok(&["preprocess", "--manifest", s(&manifest), "--cache-dir", s(&cache), "--input-shape", "32,32,32"]);
    assert!(std::fs::read_dir(&cache).unwrap().count() > 0);

    let config = serde_json::json!({
        "manifest": "data/manifest.jsonl",
        "network": { "block_counts": [2, 2, 2, 2], "base_channels": 4 },
        "input_shape": [32, 32, 32],
        "batch_size": 2,
        "epochs": 1,
        "seed": 5,
        "sampling_strategy": "US",
        "checkpoint_dir": "runs/us",
        "cache_dir": "cache"
    });
    let cfg_path = root.join("train.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    ok(&["train", "--config", s(&cfg_path)]);
    let us = root.join("runs/us/best.safetensors");
    assert!(us.exists());
    let log = std::fs::read_to_string(root.join("runs/us/epochs.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let report_path = root.join("report.json");
    ok(&["evaluate", "--us-ckpt", s(&us), "--ss-ckpt", s(&us), "--manifest", s(&manifest), "--out", s(&report_path), "--cache-dir", s(&cache)]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    let rows = report["predictions"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let (p_us, p_final) = (r["p_us"].as_f64().unwrap(), r["p_final"].as_f64().unwrap());
        assert!((p_us - p_final).abs() < 1e-15);
    }

    let att = root.join("att");
    ok(&["export-attention", "--ckpt", s(&us), "--manifest", s(&manifest), "--out", s(&att), "--grad-cam", "--cache-dir", s(&cache)]);
    let names: Vec<String> = std::fs::read_dir(&att).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.len(), 4 * 6);
    assert!(names.iter().any(|n| n.ends_with("_attention.nii")));
    assert!(names.iter().any(|n| n.ends_with("_gradcam.nii")));
}

#[test]
fn unknown_strategy_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["gen-data", "--n-covid", "1", "--n-cap", "1", "--shape", "16,16,16", "--out", s(&data)]);
    let cfg_path = root.join("train.json");
    let config = serde_json::json!({
        "manifest": "data/manifest.jsonl",
        "input_shape": [16, 16, 16],
        "checkpoint_dir": "runs"
    });
    std::fs::write(&cfg_path, serde_json::to_vec(&config).unwrap()).unwrap();
    let out = dualsamp(&["train", "--config", s(&cfg_path), "--strategy", "XX"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:") && err.contains("XX"), "{err}");
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("train.json");
    std::fs::write(&cfg_path, br#"{"manifest": "m.jsonl", "epoch": 3}"#).unwrap();
    let out = dualsamp(&["train", "--config", s(&cfg_path)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}
