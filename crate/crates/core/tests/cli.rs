//! End-to-end runs of the `fedcast` binary: output reproducibility, file
//! formats, and exit codes.

use std::path::Path;
use std::process::Command;

fn fedcast() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedcast"))
}

fn small_run_args(out: &Path) -> Vec<String> {
    [
        "--set",
        "data.n_clients=2",
        "--set",
        "data.length=400",
        "--set",
        "training.server_epochs=3",
        "--set",
        "model.batch_size=16",
        "--set",
        "training.seed=5",
        "-o",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([out.display().to_string()])
    .collect()
}

#[test]
fn bandwidth_prints_the_exchange_table() {
    let dir = tempfile::tempdir().unwrap();
    let output = fedcast()
        .arg("bandwidth")
        .arg("-o")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("84362"));
    assert!(stdout.contains("2636"));
    assert!(stdout.contains("11520"));
    assert!(stdout.contains("4800"));
    assert!(dir.path().join("bandwidth.json").exists());
}

#[test]
fn generate_writes_matching_files_and_is_reproducible() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let status = fedcast()
            .args([
                "generate",
                "--set",
                "data.n_clients=3",
                "--set",
                "data.length=200",
                "-o",
            ])
            .arg(dir.path())
            .status()
            .unwrap();
        assert!(status.success());
    }
    for i in 0..3 {
        let name = format!("data/client_0{i}.csv");
        let a = std::fs::read(dir_a.path().join(&name)).unwrap();
        let b = std::fs::read(dir_b.path().join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
        assert!(dir_a
            .path()
            .join(format!("data/client_0{i}.json"))
            .exists());
    }
}

#[test]
fn output_root_falls_back_to_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let status = fedcast()
        .arg("bandwidth")
        .env("FEDCAST_OUT", dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("bandwidth.json").exists());
}

#[test]
fn generate_with_zero_clients_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let output = fedcast()
        .args(["generate", "--set", "data.n_clients=0", "-o"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn train_then_evaluate_produces_reproducible_artifacts() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let status = fedcast()
            .arg("train")
            .args(small_run_args(dir.path()))
            .status()
            .unwrap();
        assert!(status.success());
        let status = fedcast()
            .arg("evaluate")
            .args(small_run_args(dir.path()))
            .status()
            .unwrap();
        assert!(status.success());
    }

    for name in [
        "checkpoint.fck",
        "psi_client_0.fck",
        "psi_client_1.fck",
        "history.jsonl",
        "bandwidth.json",
        "metrics.csv",
        "summary.json",
    ] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    // History rows carry the per-epoch exchange accounting.
    let history = std::fs::read_to_string(dir_a.path().join("history.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 1);
    assert_eq!(first["params_sent"], 5760);
    assert_eq!(first["params_received"], 5760);
    assert!(first["train_loss"].as_f64().unwrap().is_finite());

    // Forecast dumps parse as CSV with the documented header.
    let forecasts =
        std::fs::read_to_string(dir_a.path().join("forecasts/client_00.csv")).unwrap();
    assert!(forecasts.starts_with("timestamp,truth,forecast\n"));

    // Bandwidth JSON for the default model under P1.
    let bw: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir_a.path().join("bandwidth.json")).unwrap())
            .unwrap();
    assert_eq!(bw[0]["params_per_epoch"], 11520);
}

#[test]
fn evaluate_without_personalized_weights_fails_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let status = fedcast()
        .arg("train")
        .args(small_run_args(dir.path()))
        .status()
        .unwrap();
    assert!(status.success());
    std::fs::remove_file(dir.path().join("psi_client_1.fck")).unwrap();
    let output = fedcast()
        .arg("evaluate")
        .args(small_run_args(dir.path()))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("psi_client_1"), "stderr: {stderr}");
}

#[test]
fn evaluating_with_the_wrong_partition_is_a_checkpoint_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let status = fedcast()
        .arg("train")
        .args(small_run_args(dir.path()))
        .status()
        .unwrap();
    assert!(status.success());

    // Trained P1, evaluated as P2: shared names differ.
    let mut args = small_run_args(dir.path());
    args.splice(0..0, ["--set".into(), "training.partition=\"P2\"".into()]);
    let output = fedcast().arg("evaluate").args(args).output().unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("do not match"), "stderr: {stderr}");
}

#[test]
fn numerical_divergence_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let output = fedcast()
        .arg("train")
        .args([
            "--set",
            "training.client_lr=1e300",
            "--set",
            "training.server_epochs=3",
            "--set",
            "data.n_clients=1",
            "--set",
            "data.length=400",
            "--set",
            "model.batch_size=16",
            "-o",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("epoch"), "stderr: {stderr}");
}

#[test]
fn analyze_writes_a_readable_correlation_table() {
    let dir = tempfile::tempdir().unwrap();
    let status = fedcast()
        .args([
            "analyze",
            "--set",
            "data.n_clients=4",
            "--set",
            "data.length=2000",
            "-o",
        ])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let table = std::fs::read_to_string(dir.path().join("correlations.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "kind,feature,correlation");
    let floor = lines.next().unwrap();
    assert!(floor.starts_with("static,floor_space,"));
    let r: f64 = floor.rsplit(',').next().unwrap().parse().unwrap();
    assert!(r > 0.95, "floor-space correlation {r}");
    // Re-reads as CSV.
    let mut reader = csv::Reader::from_path(dir.path().join("correlations.csv")).unwrap();
    assert_eq!(reader.records().count(), 5);
}

#[test]
fn missing_csv_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let output = fedcast()
        .args([
            "analyze",
            "--set",
            "data.source=\"csv\"",
            "--set",
            "data.csv_paths=[\"/nonexistent/series.csv\"]",
            "-o",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn train_on_ingested_csv_files_works() {
    let dir = tempfile::tempdir().unwrap();
    let status = fedcast()
        .args([
            "generate",
            "--set",
            "data.n_clients=2",
            "--set",
            "data.length=400",
            "-o",
        ])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());

    let csv_list = format!(
        "data.csv_paths=[\"{}\",\"{}\"]",
        dir.path().join("data/client_00.csv").display(),
        dir.path().join("data/client_01.csv").display()
    );
    let status = fedcast()
        .args([
            "train",
            "--set",
            "data.source=\"csv\"",
            "--set",
            &csv_list,
            "--set",
            "training.server_epochs=2",
            "--set",
            "training.algorithm=\"fl\"",
            "--set",
            "model.batch_size=16",
            "-o",
        ])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("checkpoint.fck").exists());
}
