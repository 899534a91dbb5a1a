//! Drives the `obsr` binary: exit codes and stage artifacts.

use std::path::Path;
use std::process::Command;

use obsr_cli::artifacts::{collect_artifacts, RunManifest};
use obsr_core::regionize::RegionDataset;

fn obsr(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_obsr")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.json");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn bad_configs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = obsr(&["ingest", "--config", "/definitely/missing.json"]);
    assert_eq!(out.status.code(), Some(1));

    let mut cfg: serde_json::Value = serde_json::from_str(obsr_cli::bundled::bundled_json(obsr_cli::Task::Strpp)).unwrap();
    cfg["resolutions"] = serde_json::json!([5, 9]);
    let path = write_config(dir.path(), &cfg.to_string());
    let out = obsr(&["ingest", "--config", &path]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config stage failed"));

    assert_eq!(obsr(&["run", "--config", "bundled:nope"]).status.code(), Some(1));
    assert_eq!(obsr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(obsr(&["--help"]).status.code(), Some(0));
}

#[test]
fn later_stage_without_inputs_reports_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_string_lossy().into_owned();
    let train = obsr(&["train", "--config", "bundled:tte", "--out", &out_dir]);
    assert_eq!(train.status.code(), Some(4));
    let split = obsr(&["split", "--config", "bundled:strpp", "--out", &out_dir]);
    assert_eq!(split.status.code(), Some(3));
}

#[test]
fn regionize_writes_readable_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_string_lossy().into_owned();
    assert!(obsr(&["ingest", "--config", "bundled:strpp", "--out", &out_dir]).status.success());
    let out = obsr(&["regionize", "--config", "bundled:strpp", "--out", &out_dir]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for r in [8u8, 9, 10] {
        let res = dir.path().join(format!("res{r}"));
        let ds = RegionDataset::read(&res.join("regions.csv")).unwrap();
        assert_eq!(ds.resolution, r);
        assert_eq!(ds.total_support(), 4000);
        let geo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(res.join("regions.geojson")).unwrap()).unwrap();
        assert_eq!(geo["features"].as_array().unwrap().len(), ds.len());
        assert!(res.join("target_hist.csv").exists());
    }
    // Regionizing twice leaves byte-identical files.
    let before = collect_artifacts(dir.path()).unwrap();
    assert!(obsr(&["regionize", "--config", "bundled:strpp", "--out", &out_dir]).status.success());
    assert_eq!(before, collect_artifacts(dir.path()).unwrap());
}

#[test]
fn manifest_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.txt"), "x").unwrap();
    let m = RunManifest {
        name: "t".into(),
        task: "strpp".into(),
        config_sha256: "0".repeat(64),
        config: serde_json::json!({"k": 1}),
        artifacts: collect_artifacts(dir.path()).unwrap(),
    };
    std::fs::write(dir.path().join("manifest.json"), m.to_json()).unwrap();
    let back = RunManifest::read(dir.path()).unwrap();
    assert_eq!(back.artifacts, m.artifacts);
    assert!(obsr_cli::artifacts::verify_manifest(dir.path(), &back).unwrap().is_empty());
    std::fs::write(dir.path().join("a.txt"), "y").unwrap();
    assert_eq!(obsr_cli::artifacts::verify_manifest(dir.path(), &back).unwrap(), vec!["a.txt".to_string()]);
}
