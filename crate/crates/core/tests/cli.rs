use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scroll(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scroll"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const CONFIG: &str = r#"{
    "data": {"synthetic": {"class_count": 4, "dim": 8, "samples_per_class": 20,
                           "cluster_spread": 0.3, "shift_strength": 0.1, "seed": 3}},
    "schedule": {"kind": "class_split", "classes_per_batch": 2, "seed": 1},
    "classifier": {"kind": "ridge", "lambda": 0.5},
    "buffer": {"capacity": 16, "strategy": "exemplar", "seed": 4},
    "adapt": {"mode": "adapter", "epochs": 3},
    "checkpoints": [1]
}"#;

#[test]
fn run_writes_report_checkpoints_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let report = dir.path().join("report.json");
    let ckpt = dir.path().join("model");
    let curve = dir.path().join("curve.csv");
    let out = scroll(&[
        "run",
        "--config",
        &cfg,
        "--report",
        report.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--curve",
        curve.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["f_star"]["accuracy"].as_f64().unwrap() <= 1.0);
    assert_eq!(json["intermediate"].as_array().unwrap().len(), 1);
    let state = scroll::checkpoint::load_state(dir.path().join("model.state")).unwrap();
    assert_eq!(state.observed(), 80);
    scroll::checkpoint::load_buffer(dir.path().join("model.buffer")).unwrap();
    scroll::checkpoint::load_adapted(dir.path().join("model.adapted")).unwrap();
    let curve = fs::read_to_string(&curve).unwrap();
    assert!(curve.starts_with("epoch,loss,buffer_acc"));
    assert_eq!(curve.lines().count(), 4);
}

#[test]
fn run_prints_report_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = scroll(&["run", "--config", &cfg]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(json["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"data": {}}"#);
    assert_eq!(scroll(&["run", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(scroll(&["run"]).status.code(), Some(1));
    assert_eq!(scroll(&["frobnicate"]).status.code(), Some(1));
    let cfg = write_config(dir.path(), CONFIG);
    assert_eq!(
        scroll(&["sweep", "--config", &cfg, "--kinds", "split,nope"]).status.code(),
        Some(1)
    );
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(
        scroll(&["run", "--config", missing.to_str().unwrap()]).status.code(),
        Some(2)
    );
    let no_buffer = CONFIG.replace(r#""capacity": 16"#, r#""capacity": 0"#);
    let cfg = write_config(dir.path(), &no_buffer);
    assert_eq!(scroll(&["run", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn synth_then_run_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"class_count": 3, "dim": 5, "samples_per_class": 10, "cluster_spread": 0.1, "seed": 2}"#,
    )
    .unwrap();
    let prefix = dir.path().join("toy");
    for format in ["binary", "csv"] {
        let out = scroll(&[
            "synth",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            prefix.to_str().unwrap(),
            "--format",
            format,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(dir.path().join("toy_train.scrl").exists());
    assert!(dir.path().join("toy_test.csv").exists());
    let cfg = write_config(
        dir.path(),
        r#"{
        "data": {"files": {"train": "toy_train.csv", "test": "toy_test.csv", "format": "csv"}},
        "schedule": {"kind": "random_iid", "batch_size": 4},
        "classifier": {"kind": "ncc"}
    }"#,
    );
    let out = scroll(&["run", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_and_buffer_study_commands() {
    let dir = tempfile::tempdir().unwrap();
    let memory_free = r#"{
        "data": {"synthetic": {"class_count": 4, "dim": 8, "samples_per_class": 20, "cluster_spread": 0.3, "seed": 3}},
        "schedule": {"kind": "single_batch"},
        "classifier": {"kind": "ncc"},
        "study": {"scenarios": [[5, 5]], "classes": [0, 1]}
    }"#;
    let cfg = write_config(dir.path(), memory_free);
    let report = dir.path().join("sweep.json");
    let out = scroll(&[
        "sweep",
        "--config",
        &cfg,
        "--schedules",
        "4",
        "--kinds",
        "split,random",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["f_t_spread"].as_f64(), Some(0.0));

    let csv = dir.path().join("study.csv");
    let raw = dir.path().join("raw");
    let out = scroll(&[
        "buffer-study",
        "--config",
        &cfg,
        "--shuffles",
        "3",
        "--out",
        csv.to_str().unwrap(),
        "--raw-dir",
        raw.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
    let raw_csv = fs::read_to_string(raw.join("b1_5_b2_5.csv")).unwrap();
    assert!(raw_csv.starts_with("class,strategy,seed,distance"));
}
