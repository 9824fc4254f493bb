//! The staged experiment: gen-tasks → pretrain → star → train-prm → grpo →
//! decode-eval. Each stage reads only artifacts it declares, writes its own
//! artifacts atomically and is recorded in the run manifest, so an
//! interrupted run resumes at the first stage without a completed record.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{ArchConfig, ExperimentConfig, LoadedConfig, RewardSource};
use super::manifest::{RunManifest, StageIo, StageRecord, StageStatus, CONFIG_SNAPSHOT};
use super::records::{load_records, persist_records, write_atomic};
use crate::checkpoint::{self, ArchKind, CheckpointHeader, Expect};
use crate::decode::{self, DecodeTrace};
use crate::error::{Error, Result};
use crate::grpo::{self, PrmReward};
use crate::mdp::{Mdp, Trajectory};
use crate::policy::{self, PolicyParams, SupervisedConfig};
use crate::prm::{self, LabeledStepRecord, StateValue, ValueMode, ValueParams};
use crate::seed::Seed;
use crate::star::{self, StarRecord, ValidatedDataset};
use crate::tasks::{oracle_trajectory, RewardModel, TaskInstance, TaskReward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenTasks,
    Pretrain,
    Star,
    TrainPrm,
    Grpo,
    DecodeEval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::GenTasks,
        Stage::Pretrain,
        Stage::Star,
        Stage::TrainPrm,
        Stage::Grpo,
        Stage::DecodeEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenTasks => "gen-tasks",
            Stage::Pretrain => "pretrain",
            Stage::Star => "star",
            Stage::TrainPrm => "train-prm",
            Stage::Grpo => "grpo",
            Stage::DecodeEval => "decode-eval",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn enabled(self, cfg: &ExperimentConfig) -> bool {
        match self {
            Stage::GenTasks | Stage::Pretrain => true,
            Stage::Star => cfg.stages.star,
            Stage::TrainPrm => cfg.stages.train_prm,
            Stage::Grpo => cfg.stages.grpo,
            Stage::DecodeEval => cfg.stages.decode_eval,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const TRAIN_TASKS: &str = "tasks/train.jsonl";
pub const EVAL_TASKS: &str = "tasks/eval.jsonl";
pub const PRETRAIN_CKPT: &str = "checkpoints/pretrain.ckpt";
pub const STAR_CKPT: &str = "checkpoints/star.ckpt";
pub const PRM_CKPT: &str = "checkpoints/prm.ckpt";
pub const GRPO_CKPT: &str = "checkpoints/grpo.ckpt";
pub const STAR_RECORDS: &str = "data/star_records.jsonl";
pub const LABELED_STEPS: &str = "data/labeled_steps.jsonl";
pub const PRETRAIN_METRICS: &str = "metrics/pretrain.csv";
pub const STAR_METRICS: &str = "metrics/star.csv";
pub const PRM_METRICS: &str = "metrics/prm.csv";
pub const GRPO_METRICS: &str = "metrics/grpo.csv";
pub const DECODE_METRICS: &str = "metrics/decode.csv";
pub const DECODE_TRACES: &str = "traces/decode.jsonl";

/// The latest enabled policy checkpoint produced before `stage`.
pub fn policy_source(cfg: &ExperimentConfig, stage: Stage) -> (&'static str, Stage) {
    if stage > Stage::Grpo && cfg.stages.grpo {
        (GRPO_CKPT, Stage::Grpo)
    } else if stage > Stage::Star && cfg.stages.star {
        (STAR_CKPT, Stage::Star)
    } else {
        (PRETRAIN_CKPT, Stage::Pretrain)
    }
}

/// Inputs each stage may read, with their producers.
pub fn declared_inputs(stage: Stage, cfg: &ExperimentConfig) -> Vec<(PathBuf, String)> {
    let d = |p: &str, s: Stage| (PathBuf::from(p), s.name().to_string());
    let (pol, pol_stage) = policy_source(cfg, stage);
    match stage {
        Stage::GenTasks => vec![],
        Stage::Pretrain => vec![d(TRAIN_TASKS, Stage::GenTasks)],
        Stage::Star => vec![d(TRAIN_TASKS, Stage::GenTasks), d(PRETRAIN_CKPT, Stage::Pretrain)],
        Stage::TrainPrm => match cfg.prm.mode {
            ValueMode::Classifier => vec![d(LABELED_STEPS, Stage::Star)],
            ValueMode::Td => vec![d(TRAIN_TASKS, Stage::GenTasks), d(pol, pol_stage)],
        },
        Stage::Grpo => {
            let mut v = vec![d(TRAIN_TASKS, Stage::GenTasks), d(pol, pol_stage)];
            if cfg.grpo_reward.source == RewardSource::Prm {
                v.push(d(PRM_CKPT, Stage::TrainPrm));
            }
            v
        }
        Stage::DecodeEval => {
            let mut v = vec![d(EVAL_TASKS, Stage::GenTasks), d(pol, pol_stage)];
            if cfg.stages.train_prm {
                v.push(d(PRM_CKPT, Stage::TrainPrm));
            }
            v
        }
    }
}

pub fn save_policy(path: &Path, p: &PolicyParams, mdp: &Mdp, seed: Seed) -> Result<()> {
    let header = CheckpointHeader {
        kind: ArchKind::Policy,
        shape: p.shape(),
        vocab_fingerprint: mdp.vocab.fingerprint(),
        seed: seed.0,
    };
    checkpoint::write(path, &header, p.as_slice())
}

pub fn load_policy(path: &Path, mdp: &Mdp, arch: &ArchConfig) -> Result<PolicyParams> {
    let (h, params) = checkpoint::read(
        path,
        &Expect {
            kind: ArchKind::Policy,
            vocab_fingerprint: mdp.vocab.fingerprint(),
            window: Some(arch.window),
            hidden: Some(arch.hidden),
        },
    )?;
    PolicyParams::from_parts(h.shape, params)
}

fn value_kind(mode: ValueMode) -> ArchKind {
    match mode {
        ValueMode::Classifier => ArchKind::ValueClassifier,
        ValueMode::Td => ArchKind::ValueTd,
    }
}

pub fn save_value(path: &Path, v: &ValueParams, mdp: &Mdp, seed: Seed) -> Result<()> {
    let header = CheckpointHeader {
        kind: value_kind(v.mode()),
        shape: v.shape(),
        vocab_fingerprint: mdp.vocab.fingerprint(),
        seed: seed.0,
    };
    checkpoint::write(path, &header, v.as_slice())
}

pub fn load_value(path: &Path, mdp: &Mdp, mode: ValueMode, arch: &ArchConfig) -> Result<ValueParams> {
    let (h, params) = checkpoint::read(
        path,
        &Expect {
            kind: value_kind(mode),
            vocab_fingerprint: mdp.vocab.fingerprint(),
            window: Some(arch.window),
            hidden: Some(arch.hidden),
        },
    )?;
    ValueParams::from_parts(mode, h.shape, params)
}

/// Metrics CSV: a `# schema` comment line, then a header row and data rows.
pub fn write_metrics(path: &Path, schema: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = format!("# schema: cot-mdp/{schema} v1\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    write_atomic(path, &buf)
}

/// Reads a metrics CSV back as header plus rows.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

fn f(x: f64) -> String {
    format!("{x}")
}

/// Mixes a sub-config seed into a stage substream.
fn mixed(stage: Seed, sub: u64) -> u64 {
    stage.derive(&format!("sub-{sub}")).0
}

fn supervised_cfg(base: &SupervisedConfig, stage: Seed) -> SupervisedConfig {
    SupervisedConfig {
        seed: mixed(stage, base.seed),
        ..*base
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    mdp: &'a Mdp,
    seed: Seed,
}

fn gen_tasks(c: &Ctx, io: &mut StageIo) -> Result<()> {
    let t = &c.cfg.task;
    let spec = t.spec();
    let train = spec.generate_distinct(
        t.train_min_operands..=t.train_max_operands,
        t.train_instances,
        c.seed.derive("train"),
        &HashSet::new(),
        &c.mdp.vocab,
    )?;
    if train.len() < t.train_instances {
        log::warn!(
            "only {} distinct training questions exist (asked for {})",
            train.len(),
            t.train_instances
        );
    }
    let seen: HashSet<_> = train.iter().map(|i| i.question.clone()).collect();
    let eval = spec.generate_distinct(
        t.eval_min_operands..=t.eval_max_operands,
        t.eval_instances,
        c.seed.derive("eval"),
        &seen,
        &c.mdp.vocab,
    )?;
    if eval.is_empty() {
        return Err(Error::invalid("no held-out questions remain after the training set"));
    }
    persist_records(&train, &io.output(TRAIN_TASKS)?, c.mdp)?;
    persist_records(&eval, &io.output(EVAL_TASKS)?, c.mdp)?;
    Ok(())
}

fn pretrain(c: &Ctx, io: &mut StageIo) -> Result<()> {
    let train: Vec<TaskInstance> = load_records(&io.input(TRAIN_TASKS)?, c.mdp)?;
    let a = &c.cfg.policy;
    let init = c.seed.derive("init");
    let mut p = PolicyParams::random(c.mdp.vocab.size(), a.window, a.hidden, a.init_scale, init);
    let n = c.cfg.pretrain.examples.min(train.len());
    let mut rows = Vec::new();
    if n > 0 {
        let data: Vec<Trajectory> = train[..n].iter().map(|i| oracle_trajectory(i, c.mdp)).collect();
        let (trained, losses) = policy::supervised_update(&p, &data, &supervised_cfg(&c.cfg.pretrain.train, c.seed), c.mdp)?;
        p = trained;
        rows = losses
            .iter()
            .enumerate()
            .map(|(e, l)| vec![e.to_string(), f(*l)])
            .collect();
    }
    write_metrics(&io.output(PRETRAIN_METRICS)?, "pretrain-metrics", &["epoch", "loss"], &rows)?;
    save_policy(&io.output(PRETRAIN_CKPT)?, &p, c.mdp, init)
}

fn run_star(c: &Ctx, io: &mut StageIo) -> Result<()> {
    let train: Vec<TaskInstance> = load_records(&io.input(TRAIN_TASKS)?, c.mdp)?;
    let mut p = load_policy(&io.input(PRETRAIN_CKPT)?, c.mdp, &c.cfg.policy)?;
    let mut cfg = c.cfg.star;
    cfg.finetune = supervised_cfg(&cfg.finetune, c.seed);
    let mut dataset = ValidatedDataset::new();
    let mut labeled: Vec<LabeledStepRecord> = Vec::new();
    let mut rows = Vec::new();
    for it in 0..cfg.max_iterations {
        let r = star::star_iteration(&p, &train, &dataset, &cfg, it, c.mdp, c.seed.child(it as u64))?;
        p = r.params;
        dataset.extend(r.delta.iter().cloned(), c.mdp);
        labeled.extend(r.prm_records);
        let acc = decode::greedy_accuracy(&p, &train, c.mdp)?;
        rows.push(vec![
            it.to_string(),
            f(r.acceptance_rate),
            r.delta.len().to_string(),
            dataset.len().to_string(),
            r.generate_accepts.to_string(),
            r.rationalize_accepts.to_string(),
            r.truncated.to_string(),
            r.finetune_losses.last().map_or_else(String::new, |l| f(*l)),
            f(acc),
        ]);
    }
    let records: Vec<StarRecord> = dataset.records().to_vec();
    persist_records(&records, &io.output(STAR_RECORDS)?, c.mdp)?;
    persist_records(&labeled, &io.output(LABELED_STEPS)?, c.mdp)?;
    write_metrics(
        &io.output(STAR_METRICS)?,
        "star-metrics",
        &[
            "iteration",
            "acceptance_rate",
            "new_records",
            "dataset_size",
            "generate_accepts",
            "rationalize_accepts",
            "truncated",
            "finetune_loss",
            "greedy_accuracy",
        ],
        &rows,
    )?;
    save_policy(&io.output(STAR_CKPT)?, &p, c.mdp, c.seed)
}

fn train_prm(c: &Ctx, io: &mut StageIo) -> Result<()> {
    let pc = &c.cfg.prm;
    let arch = pc.arch();
    let init = c.seed.derive("init");
    let v0 = ValueParams::random(pc.mode, c.mdp.vocab.size(), arch.window, arch.hidden, arch.init_scale, init);
    let mut train_cfg = pc.train;
    train_cfg.seed = mixed(c.seed, train_cfg.seed);
    let (v, losses) = match pc.mode {
        ValueMode::Classifier => {
            let data: Vec<LabeledStepRecord> = load_records(&io.input(LABELED_STEPS)?, c.mdp)?;
            if data.is_empty() {
                return Err(Error::invalid("STaR produced no labeled steps to train the PRM on"));
            }
            prm::train_prm_classifier(&v0, &data, &train_cfg)?
        }
        ValueMode::Td => {
            let train: Vec<TaskInstance> = load_records(&io.input(TRAIN_TASKS)?, c.mdp)?;
            let (pol, _) = policy_source(c.cfg, Stage::TrainPrm);
            let policy = load_policy(&io.input(pol)?, c.mdp, &c.cfg.policy)?;
            let reward = TaskReward {
                cfg: c.cfg.rewards,
                density: pc.density,
            };
            let samples = prm::td_samples_from_policy(
                &policy,
                &train,
                pc.rollouts_per_instance,
                &pc.proposal(),
                &reward,
                c.mdp,
                c.seed.derive("samples"),
            )?;
            prm::train_prm_td(&v0, &samples, pc.gamma, &train_cfg)?
        }
    };
    let rows: Vec<Vec<String>> = losses
        .iter()
        .enumerate()
        .map(|(e, l)| vec![e.to_string(), f(*l)])
        .collect();
    write_metrics(&io.output(PRM_METRICS)?, "prm-metrics", &["epoch", "loss"], &rows)?;
    save_value(&io.output(PRM_CKPT)?, &v, c.mdp, init)
}

fn run_grpo(c: &Ctx, io: &mut StageIo) -> Result<()> {
    let train: Vec<TaskInstance> = load_records(&io.input(TRAIN_TASKS)?, c.mdp)?;
    let (pol, _) = policy_source(c.cfg, Stage::Grpo);
    let start = load_policy(&io.input(pol)?, c.mdp, &c.cfg.policy)?;
    let oracle;
    let learned;
    let reward: &dyn RewardModel = match c.cfg.grpo_reward.source {
        RewardSource::Oracle => {
            oracle = TaskReward {
                cfg: c.cfg.rewards,
                density: c.cfg.grpo_reward.density,
            };
            &oracle
        }
        RewardSource::Prm => {
            let v = load_value(&io.input(PRM_CKPT)?, c.mdp, ValueMode::Classifier, &c.cfg.prm.arch())?;
            learned = PrmReward::new(v, c.cfg.rewards)?;
            &learned
        }
    };
    let (p, metrics) = grpo::grpo_update(
        &start,
        &start,
        &train,
        &c.cfg.grpo,
        reward,
        &c.cfg.rewards,
        c.mdp,
        c.seed,
        |_, _| {},
    )?;
    let rows: Vec<Vec<String>> = metrics
        .iter()
        .map(|m| {
            vec![
                m.group_index.to_string(),
                f(m.mean_raw_reward),
                f(m.objective),
                f(m.kl),
                f(m.clip_fraction),
                f(m.accuracy_estimate),
            ]
        })
        .collect();
    write_metrics(
        &io.output(GRPO_METRICS)?,
        "grpo-metrics",
        &["group_index", "mean_raw_reward", "objective", "kl", "clip_fraction", "accuracy_estimate"],
        &rows,
    )?;
    save_policy(&io.output(GRPO_CKPT)?, &p, c.mdp, c.seed)
}

fn decode_eval(c: &Ctx, io: &mut StageIo) -> Result<()> {
    let eval: Vec<TaskInstance> = load_records(&io.input(EVAL_TASKS)?, c.mdp)?;
    let (pol, _) = policy_source(c.cfg, Stage::DecodeEval);
    let policy = load_policy(&io.input(pol)?, c.mdp, &c.cfg.policy)?;
    let prm = if c.cfg.stages.train_prm {
        Some(load_value(&io.input(PRM_CKPT)?, c.mdp, c.cfg.prm.mode, &c.cfg.prm.arch())?)
    } else {
        None
    };
    let prm_ref = prm.as_ref().map(|v| v as &dyn StateValue);
    let mut rows = Vec::new();
    let mut traces: Vec<DecodeTrace> = Vec::new();
    for b in &c.cfg.decode.budgets {
        // same seed for every strategy: paired comparison
        let (r, t) = decode::evaluate_strategy(b, &policy, prm_ref, &eval, c.mdp, c.seed)?;
        log::info!("{}: accuracy {:.3}", r.strategy, r.accuracy);
        rows.push(vec![
            r.strategy,
            r.budget.to_string(),
            f(r.accuracy),
            f(r.policy_evals),
            f(r.prm_evals),
            format!("{:.3}", r.seconds),
        ]);
        traces.extend(t);
    }
    write_metrics(
        &io.output(DECODE_METRICS)?,
        "decode-report",
        &["strategy", "budget", "accuracy", "policy_evals", "prm_evals", "seconds"],
        &rows,
    )?;
    if c.cfg.decode.traces {
        persist_records(&traces, &io.output(DECODE_TRACES)?, c.mdp)?;
    }
    Ok(())
}

fn run_stage(stage: Stage, c: &Ctx, io: &mut StageIo) -> Result<()> {
    match stage {
        Stage::GenTasks => gen_tasks(c, io),
        Stage::Pretrain => pretrain(c, io),
        Stage::Star => run_star(c, io),
        Stage::TrainPrm => train_prm(c, io),
        Stage::Grpo => run_grpo(c, io),
        Stage::DecodeEval => decode_eval(c, io),
    }
}

pub fn stage_seed(master: u64, stage: Stage) -> Seed {
    Seed(master).derive(stage.name())
}

/// Runs every enabled stage up to and including `last`, skipping stages the
/// manifest already records as done with their artifacts present.
pub fn run_until(loaded: &LoadedConfig, last: Stage) -> Result<RunManifest> {
    let cfg = &loaded.config;
    cfg.validate()?;
    let mdp = cfg.mdp();
    let root = cfg.output_dir.clone();
    fs::create_dir_all(&root).map_err(|e| {
        Error::config("output_dir", format!("{} is not writable: {e}", root.display()))
    })?;
    let fresh = RunManifest::new(&loaded.bytes, cfg.seed);
    let mut manifest = match RunManifest::read(&root)? {
        Some(m) if m.config_sha256 == fresh.config_sha256 => m,
        Some(_) => {
            log::warn!("{}: configuration changed, starting over", root.display());
            fresh
        }
        None => fresh,
    };
    write_atomic(&root.join(CONFIG_SNAPSHOT), &loaded.bytes)?;
    manifest.write(&root)?;

    let mut reran = false;
    for stage in Stage::ALL.into_iter().filter(|&s| s <= last) {
        let seed = stage_seed(cfg.seed, stage);
        if !stage.enabled(cfg) {
            manifest.record(StageRecord {
                name: stage.name().into(),
                status: StageStatus::Skipped,
                seed: seed.0,
                inputs: vec![],
                reads: vec![],
                artifacts: vec![],
                seconds: 0.0,
                error: None,
            });
            manifest.write(&root)?;
            continue;
        }
        if !reran {
            if let Some(rec) = manifest.stage(stage.name()) {
                if rec.status == StageStatus::Done && rec.artifacts.iter().all(|p| root.join(p).exists()) {
                    log::info!("{stage}: done, resuming past it");
                    continue;
                }
            }
        }
        reran = true;
        log::info!("{stage}: running");
        let mut io = StageIo::new(&root, stage.name(), declared_inputs(stage, cfg));
        let ctx = Ctx {
            cfg,
            mdp: &mdp,
            seed,
        };
        let start = Instant::now();
        let outcome = run_stage(stage, &ctx, &mut io);
        let rec = StageRecord {
            name: stage.name().into(),
            status: if outcome.is_ok() {
                StageStatus::Done
            } else {
                StageStatus::Failed
            },
            seed: seed.0,
            inputs: io.declared(),
            reads: io.reads().to_vec(),
            artifacts: io.artifacts().to_vec(),
            seconds: start.elapsed().as_secs_f64(),
            error: outcome.as_ref().err().map(ToString::to_string),
        };
        // later stages depend on this one's outputs
        manifest
            .stages
            .retain(|s| Stage::from_name(&s.name).is_none_or(|x| x < stage));
        manifest.record(rec);
        manifest.write(&root)?;
        outcome?;
    }
    Ok(manifest)
}

pub fn run_pipeline(loaded: &LoadedConfig) -> Result<RunManifest> {
    run_until(loaded, Stage::DecodeEval)
}
