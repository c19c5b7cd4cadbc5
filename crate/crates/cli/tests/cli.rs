use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bikescan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bikescan")).args(args).current_dir(cwd).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small enough that every stage finishes in a few seconds.
fn tiny_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "synth": { "n_bikes": 60, "days": 1 },
        "features": { "t_steps": 8 },
        "model": { "d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16 },
        "pretrain": { "epochs": 1 },
        "finetune": { "epochs": 2 },
        "baselines": { "scratch": { "epochs": 1 } }
    });
    let path = dir.join("tiny.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.display().to_string()
}

#[test]
fn unknown_command_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bikescan(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"model": {"d_model": 10, "n_heads": 4}}"#).unwrap();
    let o = bikescan(&["synth", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_heads") || stderr(&o).contains("d_model"), "{}", stderr(&o));

    fs::write(&path, r#"{"synth": {"n_bike": 10}}"#).unwrap();
    let o = bikescan(&["synth", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_bike"), "{}", stderr(&o));
}

#[test]
fn eval_without_model_names_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = bikescan(&["eval", "--checkpoint", "nowhere"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("missing artifact") && err.contains("nowhere"), "{err}");
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for out in ["a", "b"] {
        let o = bikescan(&["synth", "--config", &cfg, "--seed", "9", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["trips.csv", "gps.csv", "labels.csv"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn staged_run_writes_features_and_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let stages: [&[&str]; 6] = [
        &["synth", "--out", "d"],
        &["ingest", "--data", "d", "--out", "i"],
        &["featurize", "--data", "i", "--out", "f"],
        &["pretrain", "--tensor", "f", "--out", "p"],
        &["finetune", "--tensor", "f", "--checkpoint", "p", "--out", "m"],
        &["predict", "--tensor", "f", "--checkpoint", "m", "--out", "o"],
    ];
    for args in stages {
        let mut full = args.to_vec();
        full.extend(["--config", &cfg]);
        let o = bikescan(&full, dir.path());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("f/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["n"], 60);
    let preds = fs::read_to_string(dir.path().join("o/predictions.csv")).unwrap();
    let mut lines = preds.lines();
    assert_eq!(lines.next(), Some("bike_id,prob_unusable,status"));
    assert_eq!(lines.count(), 60);
}
