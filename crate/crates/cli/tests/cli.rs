use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--synthetic",
    "--tasks",
    "3",
    "--ways",
    "3",
    "--shots",
    "2",
    "--first-task-samples",
    "4",
    "--test-per-relation",
    "2",
    "--vocab-size",
    "60",
    "--epochs-adapt",
    "1",
    "--epochs-sckd",
    "1",
    "--set",
    "model_dim=8",
    "--set",
    "heads=2",
    "--set",
    "ffn_dim=8",
    "--set",
    "hidden_dim=8",
];

fn cfs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfs")).args(args).output().unwrap()
}

fn run_in(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    cfs(&args)
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["--dump-reps", "--save-model"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final average accuracy"));
    assert!(stdout.contains("bwt"));
    for f in [
        "acc_matrix.csv",
        "summary.json",
        "manifest.json",
        "loss_trace_task1.csv",
        "loss_trace_task3.csv",
        "reps.csv",
        "memory.csv",
        "model/model.json",
    ] {
        assert!(tmp.path().join(f).exists(), "missing {f}");
    }
    let matrix = std::fs::read_to_string(tmp.path().join("acc_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 4);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["tasks_completed"], 3);
}

#[test]
fn identical_runs_give_identical_matrices() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run_in(a.path(), &["--seed", "4"]).status.success());
    assert!(run_in(b.path(), &["--seed", "4"]).status.success());
    let read = |d: &Path| std::fs::read_to_string(d.join("acc_matrix.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.cfg");
    std::fs::write(&conf, "# baseline run\nmode = joint\ntau = 0.5\nseed = 3\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = run_in(&out_dir, &["--config", conf.to_str().unwrap(), "--tau", "0.9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["tau"], 0.9);
    assert_eq!(manifest["config"]["seed"], 3);
    assert_eq!(manifest["summary"]["mode"], "joint");
}

#[test]
fn bad_configuration_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    for extra in [&["--set", "no_such_key=1"][..], &["--tau", "1.5"], &["--baseline", "bogus"]] {
        let out = run_in(tmp.path(), extra);
        assert!(!out.status.success(), "accepted {extra:?}");
    }
    let out = cfs(&["run", "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn diverging_training_keeps_partial_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["--lr-encoder", "1e300", "--lr-projection", "1e300", "--lr-classifier", "1e300"]);
    assert!(!out.status.success());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["error"].is_string(), "{manifest}");
}

#[test]
fn generated_data_runs_from_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    let mut args = vec!["generate", "--out", data_dir.to_str().unwrap()];
    args.extend_from_slice(TINY);
    assert!(cfs(&args).status.success());
    let data = data_dir.join("data.jsonl");
    let out_dir = tmp.path().join("out");
    let out = cfs(&[
        "run",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--epochs-adapt",
        "1",
        "--epochs-sckd",
        "1",
        "--set",
        "model_dim=8",
        "--set",
        "heads=2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("acc_matrix.csv").exists());
}

#[test]
fn sweep_aggregates_each_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--out", tmp.path().to_str().unwrap(), "--memory", "1,2", "--seeds", "1,2"];
    args.extend_from_slice(TINY);
    let out = cfs(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = std::fs::read_to_string(tmp.path().join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);
    let agg = std::fs::read_to_string(tmp.path().join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 3);
    assert!(tmp.path().join("memory2_seed1/acc_matrix.csv").exists());

    let mut empty = vec!["sweep", "--out", tmp.path().to_str().unwrap(), "--memory", ""];
    empty.extend_from_slice(TINY);
    assert!(!cfs(&empty).status.success());
}
