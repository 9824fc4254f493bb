mod common;

use common::*;
use cot_mdp::harness::manifest::{sha256_hex, StageIo};
use cot_mdp::harness::pipeline::{PRETRAIN_CKPT, STAR_CKPT, TRAIN_TASKS};
use cot_mdp::harness::{run_pipeline, run_until, RunManifest, Stage, StageStatus};
use cot_mdp::Error;

#[test]
fn two_runs_produce_identical_metrics() {
    assert_eq!(pipeline_metric_differences(TINY_PIPELINE), Vec::<String>::new());
}

#[test]
fn all_data_and_checkpoints_are_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&loaded(TINY_PIPELINE, a.path())).unwrap();
    run_pipeline(&loaded(TINY_PIPELINE, b.path())).unwrap();
    let files = files_below(a.path());
    assert_eq!(files, files_below(b.path()));
    for rel in files {
        let name = rel.display().to_string();
        if name.ends_with("decode.csv") || name == "manifest.json" {
            continue;
        }
        assert_eq!(std::fs::read(a.path().join(&rel)).unwrap(), std::fs::read(b.path().join(&rel)).unwrap(), "{name}");
    }
}

#[test]
fn manifest_hashes_the_config_bytes_and_seeds_each_stage() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_pipeline(&loaded(TINY_PIPELINE, dir.path())).unwrap();
    assert_eq!(m.config_sha256, sha256_hex(TINY_PIPELINE.as_bytes()));
    assert_eq!(m.master_seed, 5);
    assert_eq!(RunManifest::read(dir.path()).unwrap().unwrap(), m);
    let names: Vec<&str> = m.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, Stage::ALL.iter().map(|s| s.name()).collect::<Vec<_>>());
    let mut seeds: Vec<u64> = m.stages.iter().map(|s| s.seed).collect();
    seeds.dedup();
    assert_eq!(seeds.len(), m.stages.len());
    // every read was declared
    for s in &m.stages {
        assert!(s.reads.iter().all(|r| s.inputs.contains(r)), "{}", s.name);
        assert_eq!(s.status, StageStatus::Done);
    }
    assert_eq!(std::fs::read(dir.path().join("config.toml")).unwrap(), TINY_PIPELINE.as_bytes());
}

#[test]
fn different_seeds_give_different_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&loaded(TINY_PIPELINE, a.path())).unwrap();
    run_pipeline(&loaded(TINY_PIPELINE, b.path()).with_seed(6)).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join(TRAIN_TASKS)).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}

#[test]
fn resumed_run_matches_a_single_run() {
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    run_pipeline(&loaded(TINY_PIPELINE, whole.path())).unwrap();
    run_until(&loaded(TINY_PIPELINE, split.path()), Stage::Star).unwrap();
    let m = run_pipeline(&loaded(TINY_PIPELINE, split.path())).unwrap();
    assert_eq!(m.stages.len(), Stage::ALL.len());
    for rel in files_below(whole.path()) {
        let name = rel.display().to_string();
        if name.ends_with("decode.csv") || name == "manifest.json" {
            continue;
        }
        assert_eq!(
            std::fs::read(whole.path().join(&rel)).unwrap(),
            std::fs::read(split.path().join(&rel)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn disabled_stages_are_skipped_and_downstream_falls_back() {
    let text = format!("{TINY_PIPELINE}\n[stages]\nstar = false\ntrain_prm = false\n");
    // the decode budgets above need a PRM; keep greedy only
    let text = text.replace("strategy = \"best_of_n\"\nbudget = 4", "strategy = \"greedy\"")
        .replace("strategy = \"beam\"\nbudget = 3", "strategy = \"greedy\"")
        .replace("strategy = \"mcts\"\nbudget = 16", "strategy = \"greedy\"");
    let dir = tempfile::tempdir().unwrap();
    let m = run_pipeline(&loaded(&text, dir.path())).unwrap();
    let status = |n: &str| m.stage(n).unwrap().status;
    assert_eq!(status("star"), StageStatus::Skipped);
    assert_eq!(status("train-prm"), StageStatus::Skipped);
    assert_eq!(status("grpo"), StageStatus::Done);
    assert!(!dir.path().join(STAR_CKPT).exists());
    let grpo = m.stage("grpo").unwrap();
    assert!(grpo.reads.iter().any(|p| p.ends_with("pretrain.ckpt")));
}

#[test]
fn changed_config_starts_over() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&loaded(TINY_PIPELINE, dir.path())).unwrap();
    let other = TINY_PIPELINE.replace("groups = 12", "groups = 11");
    let m = run_pipeline(&loaded(&other, dir.path())).unwrap();
    assert_eq!(m.config_sha256, sha256_hex(other.as_bytes()));
    assert_eq!(std::fs::read(dir.path().join("config.toml")).unwrap(), other.as_bytes());
}

#[test]
fn undeclared_reads_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut io = StageIo::new(dir.path(), "grpo", vec![(PRETRAIN_CKPT.into(), "pretrain".into())]);
    match io.input(TRAIN_TASKS) {
        Err(Error::UndeclaredRead { stage, .. }) => assert_eq!(stage, "grpo"),
        other => panic!("expected an undeclared-read error, got {other:?}"),
    }
    match io.input(PRETRAIN_CKPT) {
        Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "pretrain"),
        other => panic!("expected a missing-artifact error, got {other:?}"),
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let text = format!("{TINY_PIPELINE}\n[grpo_extra]\nx = 1\n");
    assert!(cot_mdp::harness::parse_config(&text).is_err());
}
