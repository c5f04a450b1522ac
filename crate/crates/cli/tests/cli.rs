use std::fs;

use assert_cmd::Command;

fn cli() -> Command {
    Command::cargo_bin("trace-auth").unwrap()
}

#[test]
fn synth_train_report_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");
    cli().args(["synth", "--participants", "4", "--per-digit", "4", "--out"]).arg(&data).assert().success();

    let config = dir.path().join("run.toml");
    fs::write(&config, "max_epochs = 1\nseed = 5\n\n[raster]\nimage_size = 32\nline_width = 6\n").unwrap();
    cli()
        .args(["train", "--participant", "p01", "--participant", "p02", "--data"])
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&runs)
        .assert()
        .success();
    for f in ["p01/model.tam", "p01/summary.json", "p02/summary.json", "run-manifest.json", "aggregate.json"] {
        assert!(runs.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(runs.join("run-manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["dataset_hash"].as_str().unwrap().len(), 64);

    let out = cli().arg("report").arg(&runs).assert().success().get_output().stdout.clone();
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("mean") && text.contains("p02"));
    assert!(runs.join("plots/p01/roc.svg").exists());
    assert!(runs.join("table.txt").exists());

    let out = cli()
        .args(["evaluate", "--participant", "p01", "--seed", "5", "--data"])
        .arg(&data)
        .arg("--model")
        .arg(runs.join("p01/model.tam"))
        .assert()
        .success()
        .get_output()
        .stdout
        .clone();
    let report: serde_json::Value = serde_json::from_slice(&out).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(runs.join("p01/summary.json")).unwrap()).unwrap();
    assert_eq!(report["acc"], summary["report"]["acc"]);
}

#[test]
fn rasterize_and_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    fs::create_dir_all(&raw).unwrap();
    fs::write(raw.join("a.json"), r#"{"user": "zoe", "label": 7, "points": [[10, 10, 0], [200, 220, 5]]}"#).unwrap();
    fs::write(raw.join("b.json"), r#"{"user": "zoe", "label": 11, "points": [[10, 10]]}"#).unwrap();
    let data = dir.path().join("data");
    let out = cli().arg("ingest").arg(&raw).arg("--out").arg(&data).assert().success().get_output().stdout.clone();
    assert!(String::from_utf8(out).unwrap().contains("stored 1 drawings, rejected 1"));

    let pgm = dir.path().join("pgm");
    cli().args(["rasterize", "--size", "64", "--width", "4", "--format", "p2", "--data"]).arg(&data).arg("--out").arg(&pgm).assert().success();
    let file = walkdir::WalkDir::new(&pgm).into_iter().flatten().find(|e| e.path().extension().is_some_and(|x| x == "pgm")).unwrap();
    assert!(fs::read_to_string(file.path()).unwrap().starts_with("P2\n64 64\n"));
    cli().args(["rasterize", "--size", "48", "--data"]).arg(&data).arg("--out").arg(&pgm).assert().failure();
}
