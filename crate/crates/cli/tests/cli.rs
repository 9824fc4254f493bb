use std::path::Path;
use std::process::Command;

use serde_json::Value;

const CONFIG: &str = r#"
seed = 3

[task]
kind = "addition_chain"
train_instances = 12
eval_instances = 6

[policy]
window = 16
hidden = 16
init_scale = 0.1

[pretrain]
examples = 4

[star]
max_iterations = 1

[prm]
hidden = 16
window = 16

[grpo]
groups = 4

[[decode.budgets]]
strategy = "greedy"

[[decode.budgets]]
strategy = "best_of_n"
budget = 2
"#;

/// Runs the binary and returns its exit status and the JSON summary line.
fn cot_mdp(args: &[&str]) -> (bool, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_cot-mdp"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8(out.stdout).expect("utf-8");
    let last = stdout.lines().last().unwrap_or_default();
    (out.status.success(), serde_json::from_str(last).expect("json summary"))
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).expect("write config");
    path.display().to_string()
}

#[test]
fn gen_tasks_writes_both_task_sets() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("run");
    let (ok, v) = cot_mdp(&["gen-tasks", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(ok, "{v}");
    assert_eq!(v["status"], "ok");
    assert_eq!(v["stage"], "gen-tasks");
    assert_eq!(v["config_sha256"].as_str().map(str::len), Some(64));
    let train = std::fs::read_to_string(out.join("tasks/train.jsonl")).expect("train set");
    assert_eq!(train.lines().count(), 12 + 1);
    assert!(out.join("tasks/eval.jsonl").exists());
    assert!(!out.join("checkpoints").exists());
}

#[test]
fn seed_override_controls_the_run() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), CONFIG);
    let tasks = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let (ok, v) = cot_mdp(&["gen-tasks", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(ok, "{v}");
        std::fs::read_to_string(out.join("tasks/train.jsonl")).expect("train set")
    };
    assert_eq!(tasks("8", "a"), tasks("8", "b"));
    assert_ne!(tasks("8", "a"), tasks("9", "c"));
}

#[test]
fn pipeline_resumes_after_a_partial_run() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let (ok, v) = cot_mdp(&["star", "--config", &cfg, "--out", out_s]);
    assert!(ok, "{v}");
    assert!(!out.join("metrics/decode.csv").exists());
    let (ok, v) = cot_mdp(&["pipeline", "--config", &cfg, "--out", out_s]);
    assert!(ok, "{v}");
    assert_eq!(v["stage"], "decode-eval");
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).expect("manifest")).expect("json");
    let names: Vec<&str> = manifest["stages"].as_array().expect("stages").iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["gen-tasks", "pretrain", "star", "train-prm", "grpo", "decode-eval"]);
    let report = std::fs::read_to_string(out.join("metrics/decode.csv")).expect("report");
    assert!(report.contains("greedy,1,"));
    assert!(report.contains("best_of_n(2),2,"));
}

#[test]
fn config_errors_are_reported_as_json() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path(), &format!("{CONFIG}\n[unknown_section]\nx = 1\n"));
    let (ok, v) = cot_mdp(&["gen-tasks", "--config", &cfg]);
    assert!(!ok);
    assert_eq!(v["status"], "error");
    assert_eq!(v["kind"], "config");
    assert!(v["message"].as_str().unwrap().contains("unknown_section"));

    let missing = dir.path().join("absent.toml");
    let (ok, v) = cot_mdp(&["gen-tasks", "--config", missing.to_str().unwrap()]);
    assert!(!ok);
    assert_eq!(v["status"], "error");
}
