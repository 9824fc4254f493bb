//! Self-taught rationale collection: sample reasoning traces, keep the ones
//! whose final answer verifies, fine-tune on the keepers.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Mdp, State, TokenId, Trajectory};
use crate::policy::{self, PolicyParams, Sampling, SupervisedConfig};
use crate::prm::LabeledStepRecord;
use crate::seed::{Rng, Seed};
use crate::tasks::{label_step, verify_answer, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StarMode {
    /// Condition on the question only.
    #[default]
    Generate,
    /// Condition on the question plus the gold answer as a hint.
    Rationalize,
}

/// How candidate answers are judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validation {
    /// Exact task verifier on the sampled answer.
    #[default]
    Verifier,
    /// Re-derive the answer greedily from `Q` and the sampled steps, then verify it.
    PolicyAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StarConfig {
    pub samples_per_question: usize,
    pub temperature: f64,
    pub mode: StarMode,
    pub max_iterations: usize,
    pub accept_cap_per_question: usize,
    /// Accepted traces need at least this many reasoning steps.
    pub min_steps: usize,
    pub validation: Validation,
    pub finetune: SupervisedConfig,
}

impl Default for StarConfig {
    fn default() -> Self {
        Self {
            samples_per_question: 4,
            temperature: 1.0,
            mode: StarMode::Rationalize,
            max_iterations: 3,
            accept_cap_per_question: 2,
            min_steps: 1,
            validation: Validation::Verifier,
            finetune: SupervisedConfig::default(),
        }
    }
}

impl StarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_question == 0 {
            return Err(Error::config("star.samples_per_question", "must be ≥ 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("star.temperature", "must be > 0"));
        }
        if self.accept_cap_per_question == 0 {
            return Err(Error::config("star.accept_cap_per_question", "must be ≥ 1"));
        }
        self.finetune.validate("star.finetune")
    }
}

/// One validated trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StarRecord {
    pub instance_id: String,
    pub trajectory: Trajectory,
    pub iteration: usize,
    pub mode: StarMode,
    /// Oracle label per reasoning step.
    pub step_labels: Vec<bool>,
}

/// Accepted traces, deduplicated on (instance, full token sequence).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidatedDataset {
    records: Vec<StarRecord>,
    keys: HashSet<(String, Vec<TokenId>)>,
}

impl ValidatedDataset {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(rec: &StarRecord, mdp: &Mdp) -> (String, Vec<TokenId>) {
        (rec.instance_id.clone(), rec.trajectory.tokens(&mdp.vocab))
    }

    pub fn contains(&self, instance_id: &str, traj: &Trajectory, mdp: &Mdp) -> bool {
        self.keys
            .contains(&(instance_id.to_string(), traj.tokens(&mdp.vocab)))
    }

    /// Adds the record unless its key is present; returns whether it was added.
    pub fn insert(&mut self, rec: StarRecord, mdp: &Mdp) -> bool {
        if !self.keys.insert(Self::key(&rec, mdp)) {
            return false;
        }
        self.records.push(rec);
        true
    }

    pub fn extend(&mut self, recs: impl IntoIterator<Item = StarRecord>, mdp: &Mdp) {
        for r in recs {
            self.insert(r, mdp);
        }
    }

    pub fn records(&self) -> &[StarRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.records.iter().map(|r| r.trajectory.clone()).collect()
    }
}

/// Conditioning context for rationalization: `Q # A ;`.
pub fn hint_context(inst: &TaskInstance, mdp: &Mdp) -> Vec<TokenId> {
    let mut h = inst.question.clone();
    h.push(mdp.vocab.answer_marker());
    h.extend_from_slice(&inst.gold_answer);
    h.push(mdp.vocab.step_delimiter());
    h
}

/// Sampled candidates for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub trajectories: Vec<Trajectory>,
    /// Samples flagged truncated.
    pub truncated: usize,
    pub policy_evals: usize,
}

/// `n` rollouts at the configured temperature. When every sample is
/// truncated the list comes back empty and `truncated == n`.
pub fn generate_rationales(
    params: &PolicyParams,
    inst: &TaskInstance,
    cfg: &StarConfig,
    mode: StarMode,
    mdp: &Mdp,
    rng: &mut Rng,
) -> Result<Candidates> {
    cfg.validate()?;
    let hint = match mode {
        StarMode::Generate => None,
        StarMode::Rationalize => Some(hint_context(inst, mdp)),
    };
    let mut out = Candidates {
        trajectories: Vec::with_capacity(cfg.samples_per_question),
        truncated: 0,
        policy_evals: 0,
    };
    for _ in 0..cfg.samples_per_question {
        let r = policy::rollout(
            params,
            &inst.question,
            hint.as_deref(),
            Sampling::Temperature(cfg.temperature),
            mdp,
            rng,
        )?;
        out.policy_evals += r.policy_evals;
        out.truncated += usize::from(r.trajectory.truncated);
        out.trajectories.push(r.trajectory);
    }
    if out.truncated == cfg.samples_per_question {
        log::debug!("{}: all {} samples truncated", inst.id, out.truncated);
        out.trajectories.clear();
    }
    Ok(out)
}

/// Oracle label of every reasoning step.
pub fn step_labels(traj: &Trajectory, inst: &TaskInstance, mdp: &Mdp) -> Result<Vec<bool>> {
    let states = traj.states(mdp)?;
    traj.steps
        .iter()
        .enumerate()
        .map(|(d, s)| Ok(label_step(inst, &states[d], s, mdp)?.correct))
        .collect()
}

/// A candidate that passed validation, with its step annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Accepted {
    pub trajectory: Trajectory,
    pub step_labels: Vec<bool>,
}

/// Keeps candidates whose final answer verifies. Acceptance keys on the
/// answer only; wrong intermediate steps are kept and labeled as such.
pub fn self_validate(candidates: &[Trajectory], inst: &TaskInstance, mdp: &Mdp) -> Result<Vec<Accepted>> {
    let mut out = Vec::new();
    for t in candidates {
        let Some(answer) = &t.answer else { continue };
        if !verify_answer(inst, answer, &mdp.vocab) {
            continue;
        }
        out.push(Accepted {
            step_labels: step_labels(t, inst, mdp)?,
            trajectory: t.clone(),
        });
    }
    Ok(out)
}

/// Like [`self_validate`], but the answer judged is the policy's greedy
/// answer given `Q` and the sampled steps.
pub fn self_validate_with_policy(
    candidates: &[Trajectory],
    inst: &TaskInstance,
    params: &PolicyParams,
    mdp: &Mdp,
) -> Result<Vec<Accepted>> {
    let mut out = Vec::new();
    for t in candidates {
        if t.answer.is_none() {
            continue;
        }
        let mut s = State::initial(&t.question, &mdp.vocab);
        for a in &t.steps {
            s = crate::mdp::transition(&s, a, &mdp.limits)?;
        }
        let Ok(a2) = policy::greedy_action(params, &s, mdp) else {
            continue;
        };
        if a2.action.is_final() && verify_answer(inst, &a2.action, &mdp.vocab) {
            out.push(Accepted {
                step_labels: step_labels(t, inst, mdp)?,
                trajectory: t.clone(),
            });
        }
    }
    Ok(out)
}

/// PRM training records for every action of a complete trajectory.
pub fn labeled_records(traj: &Trajectory, inst: &TaskInstance, mdp: &Mdp) -> Result<Vec<LabeledStepRecord>> {
    let states = traj.states(mdp)?;
    let labels = step_labels(traj, inst, mdp)?;
    let mut out: Vec<LabeledStepRecord> = labels
        .iter()
        .enumerate()
        .map(|(d, &label)| LabeledStepRecord {
            state: states[d + 1].clone(),
            label,
            is_final: false,
            instance_id: inst.id.clone(),
        })
        .collect();
    if let Some(a) = &traj.answer {
        out.push(LabeledStepRecord {
            state: states.last().expect("non-empty").clone(),
            label: verify_answer(inst, a, &mdp.vocab),
            is_final: true,
            instance_id: inst.id.clone(),
        });
    }
    Ok(out)
}

/// Outcome of one generate → validate → fine-tune round.
#[derive(Debug, Clone)]
pub struct StarIteration {
    pub params: PolicyParams,
    /// Newly accepted records (not already in the cumulative dataset).
    pub delta: Vec<StarRecord>,
    /// Fraction of questions with at least one validated trace.
    pub acceptance_rate: f64,
    pub generate_accepts: usize,
    pub rationalize_accepts: usize,
    pub truncated: usize,
    /// Step-labeled records from every complete candidate, accepted or not.
    pub prm_records: Vec<LabeledStepRecord>,
    pub finetune_losses: Vec<f64>,
}

struct PerQuestion {
    accepted: Vec<(Accepted, StarMode)>,
    truncated: usize,
    prm: Vec<LabeledStepRecord>,
}

fn run_question(
    params: &PolicyParams,
    inst: &TaskInstance,
    cfg: &StarConfig,
    mdp: &Mdp,
    seed: Seed,
) -> Result<PerQuestion> {
    let mut rng = seed.rng();
    let modes: &[StarMode] = match cfg.mode {
        StarMode::Generate => &[StarMode::Generate],
        StarMode::Rationalize => &[StarMode::Generate, StarMode::Rationalize],
    };
    let mut out = PerQuestion {
        accepted: Vec::new(),
        truncated: 0,
        prm: Vec::new(),
    };
    for &mode in modes {
        let c = generate_rationales(params, inst, cfg, mode, mdp, &mut rng)?;
        out.truncated += c.truncated;
        for t in c.trajectories.iter().filter(|t| t.answer.is_some()) {
            out.prm.extend(labeled_records(t, inst, mdp)?);
        }
        let ok = match cfg.validation {
            Validation::Verifier => self_validate(&c.trajectories, inst, mdp)?,
            Validation::PolicyAnswer => self_validate_with_policy(&c.trajectories, inst, params, mdp)?,
        };
        let mut local: HashSet<Vec<TokenId>> = HashSet::new();
        for a in ok {
            if a.trajectory.steps.len() < cfg.min_steps {
                continue;
            }
            if local.insert(a.trajectory.tokens(&mdp.vocab)) {
                out.accepted.push((a, mode));
            }
        }
        if !out.accepted.is_empty() {
            break;
        }
    }
    Ok(out)
}

/// Generate, validate and fine-tune on the cumulative dataset plus the new
/// records. Params are returned unchanged when nothing new was accepted.
pub fn star_iteration(
    params: &PolicyParams,
    instances: &[TaskInstance],
    cumulative: &ValidatedDataset,
    cfg: &StarConfig,
    iteration: usize,
    mdp: &Mdp,
    seed: Seed,
) -> Result<StarIteration> {
    if instances.is_empty() {
        return Err(Error::invalid("star_iteration needs instances"));
    }
    cfg.validate()?;
    let per: Vec<PerQuestion> = instances
        .par_iter()
        .enumerate()
        .map(|(k, inst)| run_question(params, inst, cfg, mdp, seed.child(k as u64)))
        .collect::<Result<_>>()?;

    let mut next = cumulative.clone();
    let mut delta = Vec::new();
    let (mut gen, mut rat, mut truncated, mut any) = (0, 0, 0, 0);
    let mut prm_records = Vec::new();
    for (inst, q) in instances.iter().zip(per) {
        truncated += q.truncated;
        prm_records.extend(q.prm);
        any += usize::from(!q.accepted.is_empty());
        for (a, mode) in q.accepted.into_iter().take(cfg.accept_cap_per_question) {
            match mode {
                StarMode::Generate => gen += 1,
                StarMode::Rationalize => rat += 1,
            }
            let rec = StarRecord {
                instance_id: inst.id.clone(),
                trajectory: a.trajectory,
                iteration,
                mode,
                step_labels: a.step_labels,
            };
            if next.insert(rec.clone(), mdp) {
                delta.push(rec);
            }
        }
    }
    let acceptance_rate = any as f64 / instances.len() as f64;
    log::info!(
        "star iteration {iteration}: acceptance {acceptance_rate:.3}, {} new records",
        delta.len()
    );
    if delta.is_empty() {
        log::warn!("star iteration {iteration}: no new accepted traces, parameters unchanged");
        return Ok(StarIteration {
            params: params.clone(),
            delta,
            acceptance_rate,
            generate_accepts: gen,
            rationalize_accepts: rat,
            truncated,
            prm_records,
            finetune_losses: Vec::new(),
        });
    }
    let ft = SupervisedConfig {
        seed: seed.derive("finetune").0,
        ..cfg.finetune
    };
    let (p, losses) = policy::supervised_update(params, &next.trajectories(), &ft, mdp)?;
    Ok(StarIteration {
        params: p,
        delta,
        acceptance_rate,
        generate_accepts: gen,
        rationalize_accepts: rat,
        truncated,
        prm_records,
        finetune_losses: losses,
    })
}
