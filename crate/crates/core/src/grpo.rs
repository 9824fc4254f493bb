//! Group-relative policy optimization and a trajectory-level RLHF baseline.
//!
//! Rewards are pooled over every step of every output in a group, normalized
//! by the pooled mean and population standard deviation, and summed from each
//! step to the end of its output to form advantages. Ratios are taken per
//! step (whole-step log-probability) unless `per_token` is set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Action, Mdp, State, TokenId, TokenLogProb, Trajectory};
use crate::nn;
use crate::policy::{self, PolicyParams, Sampling};
use crate::prm::{prm_score, ValueMode, ValueParams};
use crate::seed::Seed;
use crate::tasks::{verify_answer, RewardConfig, RewardModel, TaskInstance};

pub const LOG_RATIO_CLAMP: f64 = 20.0;

/// `G` outputs for one question with per-action rewards and cached
/// sampling-policy log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub instance: TaskInstance,
    pub outputs: Vec<Trajectory>,
    /// `rewards[i][t]`, one per action of output `i` (`K_i` entries).
    pub rewards: Vec<Vec<f64>>,
    /// Old whole-action log-probabilities, aligned with `rewards`.
    pub old_logprobs: Vec<Vec<f64>>,
}

impl Group {
    pub fn size(&self) -> usize {
        self.outputs.len()
    }

    /// Fraction of outputs whose answer verifies.
    pub fn accuracy(&self, mdp: &Mdp) -> f64 {
        let ok = self
            .outputs
            .iter()
            .filter(|t| {
                t.answer
                    .as_ref()
                    .is_some_and(|a| verify_answer(&self.instance, a, &mdp.vocab))
            })
            .count();
        ok as f64 / self.outputs.len() as f64
    }

    pub fn mean_raw_reward(&self) -> f64 {
        let all: Vec<f64> = self.rewards.iter().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGroup {
    pub rewards: Vec<Vec<f64>>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_weight: f64,
    pub learning_rate: f64,
    pub updates_per_group: usize,
    pub std_floor: f64,
    pub temperature: f64,
    /// Number of groups to train on.
    pub groups: usize,
    /// Resampling attempts when every rollout of a group is truncated.
    pub max_group_retries: usize,
    /// One ratio per token rather than per step.
    pub per_token: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_weight: 0.04,
            learning_rate: 0.01,
            updates_per_group: 4,
            std_floor: 1e-8,
            temperature: 1.0,
            groups: 100,
            max_group_retries: 3,
            per_token: false,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("grpo.group_size", "must be ≥ 2"));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::config("grpo.clip_epsilon", "must lie in (0, 1)"));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::config("grpo.kl_weight", "must be ≥ 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("grpo.learning_rate", "must be > 0"));
        }
        if self.updates_per_group == 0 {
            return Err(Error::config("grpo.updates_per_group", "must be ≥ 1"));
        }
        if self.std_floor.is_nan() || self.std_floor < 0.0 {
            return Err(Error::config("grpo.std_floor", "must be ≥ 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("grpo.temperature", "must be > 0"));
        }
        Ok(())
    }
}

/// Expected reward under a classifier PRM: `p · correct + (1 − p) · incorrect`.
#[derive(Debug, Clone)]
pub struct PrmReward {
    pub prm: ValueParams,
    pub cfg: RewardConfig,
}

impl PrmReward {
    pub fn new(prm: ValueParams, cfg: RewardConfig) -> Result<Self> {
        if prm.mode() != ValueMode::Classifier {
            return Err(Error::invalid("PRM rewards need a classifier-mode model"));
        }
        Ok(Self { prm, cfg })
    }
}

impl RewardModel for PrmReward {
    fn state_reward(&self, _inst: &TaskInstance, state: &State, _mdp: &Mdp) -> f64 {
        if state.depth() == 0 {
            return 0.0;
        }
        let p = prm_score(&self.prm, state);
        let (good, bad) = if state.is_terminal() {
            (self.cfg.final_correct, self.cfg.final_incorrect)
        } else {
            (self.cfg.step_correct, self.cfg.step_incorrect)
        };
        p * good + (1.0 - p) * bad
    }
}

/// Per-action rewards. An output cut off without an answer adds
/// `final_incorrect` to its last action's reward, so truncating never scores
/// above answering wrongly.
pub fn output_rewards(
    traj: &Trajectory,
    inst: &TaskInstance,
    reward: &dyn RewardModel,
    final_incorrect: f64,
    mdp: &Mdp,
) -> Result<Vec<f64>> {
    let states = traj.states(mdp)?;
    let mut r: Vec<f64> = states[1..]
        .iter()
        .map(|s| reward.state_reward(inst, s, mdp))
        .collect();
    if traj.answer.is_none() {
        if let Some(last) = r.last_mut() {
            *last += final_incorrect;
        }
    }
    Ok(r)
}

/// `G` rollouts from `old` with per-output seed substreams.
#[allow(clippy::too_many_arguments)]
pub fn sample_group(
    old: &PolicyParams,
    inst: &TaskInstance,
    group_size: usize,
    sampling: Sampling,
    reward: &dyn RewardModel,
    reward_cfg: &RewardConfig,
    max_retries: usize,
    mdp: &Mdp,
    seed: Seed,
) -> Result<Group> {
    if group_size < 2 {
        return Err(Error::invalid("group size must be ≥ 2"));
    }
    for attempt in 0..=max_retries {
        let base = seed.child(attempt as u64);
        let outputs: Vec<Trajectory> = (0..group_size)
            .into_par_iter()
            .map(|i| {
                let mut rng = base.child(i as u64).rng();
                policy::rollout(old, &inst.question, None, sampling, mdp, &mut rng)
                    .map(|r| r.trajectory)
            })
            .collect::<Result<_>>()?;
        let usable: Vec<&Trajectory> = outputs.iter().filter(|t| t.num_actions() > 0).collect();
        if outputs.iter().all(|t| t.truncated) || usable.len() < outputs.len() {
            log::debug!("{}: group attempt {attempt} truncated, resampling", inst.id);
            continue;
        }
        let mut rewards = Vec::with_capacity(group_size);
        let mut old_logprobs = Vec::with_capacity(group_size);
        for t in &outputs {
            rewards.push(output_rewards(t, inst, reward, reward_cfg.final_incorrect, mdp)?);
            old_logprobs.push(t.action_logprobs());
        }
        return Ok(Group {
            instance: inst.clone(),
            outputs,
            rewards,
            old_logprobs,
        });
    }
    Err(Error::AllTruncated {
        attempts: max_retries + 1,
    })
}

/// Pooled mean and population std over every reward in the group; zero
/// everywhere when the std does not exceed `std_floor`.
pub fn normalize_rewards(rewards: &[Vec<f64>], std_floor: f64) -> NormalizedGroup {
    let all: Vec<f64> = rewards.iter().flatten().copied().collect();
    let n = all.len().max(1) as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let rewards = rewards
        .iter()
        .map(|row| {
            row.iter()
                .map(|r| if std > std_floor { (r - mean) / std } else { 0.0 })
                .collect()
        })
        .collect();
    NormalizedGroup { rewards, mean, std }
}

/// Suffix sums `A_{i,t} = Σ_{j ≥ t} r̄_i^(j)`.
pub fn advantages(norm: &NormalizedGroup) -> Vec<Vec<f64>> {
    norm.rewards
        .iter()
        .map(|row| {
            let mut out = vec![0.0; row.len()];
            let mut acc = 0.0;
            for t in (0..row.len()).rev() {
                acc += row[t];
                out[t] = acc;
            }
            out
        })
        .collect()
}

/// An importance ratio and whether its log was clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub clamped: bool,
}

/// `exp(new − old)`, with the log-ratio clamped to `±20`.
pub fn ratio_from_logprobs(new_logprob: f64, old_logprob: f64) -> Result<Ratio> {
    if !old_logprob.is_finite() {
        return Err(Error::NonFinite {
            what: "cached old log-probability",
            detail: format!("{old_logprob}"),
        });
    }
    let lr = new_logprob - old_logprob;
    let c = lr.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    Ok(Ratio {
        value: c.exp(),
        clamped: c != lr,
    })
}

pub fn importance_ratio(
    params: &PolicyParams,
    old_logprob: f64,
    state: &State,
    action: &Action,
) -> Result<Ratio> {
    ratio_from_logprobs(policy::action_logprob(params, state, action), old_logprob)
}

/// Exact `KL(p ‖ q)` between two distributions given as log-probabilities.
pub fn kl_exact(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Mean over contexts of the exact token-level `KL(π_θ ‖ π_ref)`.
pub fn kl_to_reference(params: &PolicyParams, reference: &PolicyParams, contexts: &[Vec<TokenId>]) -> f64 {
    if contexts.is_empty() {
        return 0.0;
    }
    let total: f64 = contexts
        .iter()
        .map(|c| kl_exact(&params.log_distribution(c), &reference.log_distribution(c)))
        .sum();
    total / contexts.len() as f64
}

/// KL and its gradient, averaged over contexts.
pub fn kl_and_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    contexts: &[Vec<TokenId>],
) -> (f64, Vec<f64>) {
    if contexts.is_empty() {
        return (0.0, vec![0.0; params.len()]);
    }
    let n = contexts.len() as f64;
    let shape = params.shape();
    let (sum, grad) = nn::par_accumulate(contexts, params.len(), |c, g| {
        let active = shape.encode(c);
        let act = shape.forward(params.as_slice(), &active);
        let logp = nn::log_softmax(&act.output);
        let logq = reference.log_distribution(c);
        let kl: f64 = logp
            .iter()
            .zip(&logq)
            .map(|(lp, lq)| lp.exp() * (lp - lq))
            .sum();
        // ∂KL/∂z_j = p_j (log p_j − log q_j − KL)
        let d: Vec<f64> = logp
            .iter()
            .zip(&logq)
            .map(|(lp, lq)| lp.exp() * (lp - lq - kl))
            .collect();
        shape.backward(params.as_slice(), &active, &act, &d, 1.0 / n, g);
        kl
    });
    (sum / n, grad)
}

/// Every context at which a token of the group was generated.
pub fn group_contexts(group: &Group, mdp: &Mdp) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    for t in &group.outputs {
        let mut ctx = t.question.clone();
        ctx.push(mdp.vocab.step_delimiter());
        for a in t.actions() {
            for &tok in a.tokens() {
                out.push(ctx.clone());
                ctx.push(tok);
            }
        }
    }
    out
}

/// Objective value and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub surrogate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub clamp_events: usize,
}

/// `min(ρA, clip(ρ, 1−ε, 1+ε)A)` and whether the clipped branch was taken.
pub fn clipped_term(ratio: f64, adv: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

/// `J = (1/G) Σ_i (1/K_i) Σ_t min(ρ A, clip(ρ) A) − β · KL` and its ascent
/// gradient.
pub fn grpo_objective(
    params: &PolicyParams,
    group: &Group,
    adv: &[Vec<f64>],
    reference: &PolicyParams,
    cfg: &GrpoConfig,
    mdp: &Mdp,
) -> Result<Objective> {
    let g = group.outputs.len() as f64;
    struct Term {
        value: f64,
        clipped: usize,
        terms: usize,
        clamps: usize,
        bad: Option<(usize, usize)>,
    }
    let idx: Vec<usize> = (0..group.outputs.len()).collect();
    let per: Vec<(Term, Vec<f64>)> = idx
        .par_iter()
        .map(|&i| {
            let traj = &group.outputs[i];
            let mut grad = vec![0.0; params.len()];
            let mut term = Term {
                value: 0.0,
                clipped: 0,
                terms: 0,
                clamps: 0,
                bad: None,
            };
            let k = adv[i].len() as f64;
            let mut ctx = traj.question.clone();
            ctx.push(mdp.vocab.step_delimiter());
            let mut tok_off = 0;
            for (t, a) in traj.actions().enumerate() {
                let at = adv[i][t];
                if cfg.per_token {
                    let n = a.len() as f64;
                    let mut c = ctx.clone();
                    for (j, &tok) in a.tokens().iter().enumerate() {
                        let old = traj.token_logprobs[tok_off + j];
                        let new = params.token_logprob(&c, tok);
                        let r = match ratio_from_logprobs(new, old) {
                            Ok(r) => r,
                            Err(_) => {
                                term.bad = Some((i, t));
                                return (term, grad);
                            }
                        };
                        let (v, clipped) = clipped_term(r.value, at, cfg.clip_epsilon);
                        term.value += v / (k * n);
                        term.clipped += usize::from(clipped);
                        term.clamps += usize::from(r.clamped);
                        term.terms += 1;
                        if !clipped && !r.clamped {
                            params.accumulate_token_grad(&c, tok, at * r.value / (g * k * n), &mut grad);
                        }
                        c.push(tok);
                    }
                } else {
                    let old = group.old_logprobs[i][t];
                    let new = policy::action_logprob_in(params, &ctx, a);
                    let r = match ratio_from_logprobs(new, old) {
                        Ok(r) => r,
                        Err(_) => {
                            term.bad = Some((i, t));
                            return (term, grad);
                        }
                    };
                    let (v, clipped) = clipped_term(r.value, at, cfg.clip_epsilon);
                    term.value += v / k;
                    term.clipped += usize::from(clipped);
                    term.clamps += usize::from(r.clamped);
                    term.terms += 1;
                    if !clipped && !r.clamped {
                        // ∇(ρA) = A ρ ∇log π
                        policy::accumulate_action_grad(params, &ctx, a, at * r.value / (g * k), &mut grad);
                    }
                }
                ctx.extend_from_slice(a.tokens());
                tok_off += a.len();
            }
            (term, grad)
        })
        .collect();

    let mut surrogate = 0.0;
    let mut grad = vec![0.0; params.len()];
    let (mut clipped, mut terms, mut clamps) = (0, 0, 0);
    for (t, gi) in per {
        if let Some((i, step)) = t.bad {
            return Err(Error::NonFinite {
                what: "GRPO objective",
                detail: format!("output {i}, step {step}"),
            });
        }
        surrogate += t.value;
        clipped += t.clipped;
        terms += t.terms;
        clamps += t.clamps;
        nn::axpy(&mut grad, 1.0, &gi);
    }
    surrogate /= g;

    let (kl, kl_grad) = if cfg.kl_weight > 0.0 {
        kl_and_grad(params, reference, &group_contexts(group, mdp))
    } else {
        (0.0, vec![0.0; params.len()])
    };
    nn::axpy(&mut grad, -cfg.kl_weight, &kl_grad);
    let value = surrogate - cfg.kl_weight * kl;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "GRPO objective",
            detail: format!("surrogate {surrogate}, kl {kl}"),
        });
    }
    Ok(Objective {
        value,
        gradient: grad,
        surrogate,
        kl,
        clip_fraction: if terms == 0 {
            0.0
        } else {
            clipped as f64 / terms as f64
        },
        clamp_events: clamps,
    })
}

/// One metrics row per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group_index: usize,
    pub mean_raw_reward: f64,
    pub objective: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub accuracy_estimate: f64,
}

/// Trains for `cfg.groups` groups. Questions are visited in a seeded
/// shuffled cycle; `π_old` is refreshed at every group.
#[allow(clippy::too_many_arguments)]
pub fn grpo_update(
    params: &PolicyParams,
    reference: &PolicyParams,
    instances: &[TaskInstance],
    cfg: &GrpoConfig,
    reward: &dyn RewardModel,
    reward_cfg: &RewardConfig,
    mdp: &Mdp,
    seed: Seed,
    mut on_group: impl FnMut(&PolicyParams, &GroupMetrics),
) -> Result<(PolicyParams, Vec<GroupMetrics>)> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::invalid("grpo_update needs instances"));
    }
    let mut p = params.clone();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut shuffle_rng = seed.derive("question-order").rng();
    let mut metrics = Vec::with_capacity(cfg.groups);
    for gi in 0..cfg.groups {
        if gi % instances.len() == 0 {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        }
        let inst = &instances[order[gi % instances.len()]];
        let old = p.clone();
        let group = sample_group(
            &old,
            inst,
            cfg.group_size,
            Sampling::Temperature(cfg.temperature),
            reward,
            reward_cfg,
            cfg.max_group_retries,
            mdp,
            seed.derive("group").child(gi as u64),
        )?;
        let norm = normalize_rewards(&group.rewards, cfg.std_floor);
        let adv = advantages(&norm);
        let mut first = None;
        let mut last = None;
        for _ in 0..cfg.updates_per_group {
            let obj = grpo_objective(&p, &group, &adv, reference, cfg, mdp)?;
            p.apply(cfg.learning_rate, &obj.gradient)?;
            first.get_or_insert(obj.value);
            last = Some(obj);
        }
        let last = last.expect("updates_per_group ≥ 1");
        let row = GroupMetrics {
            group_index: gi,
            mean_raw_reward: group.mean_raw_reward(),
            objective: first.expect("set"),
            kl: last.kl,
            clip_fraction: last.clip_fraction,
            accuracy_estimate: group.accuracy(mdp),
        };
        on_group(&p, &row);
        metrics.push(row);
    }
    Ok((p, metrics))
}

/// Trajectory-level REINFORCE settings for the RLHF baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlhfConfig {
    pub kl_weight: f64,
    pub learning_rate: f64,
    /// Sampled trajectories per step.
    pub samples_per_step: usize,
    pub steps: usize,
    pub temperature: f64,
}

impl Default for RlhfConfig {
    fn default() -> Self {
        Self {
            kl_weight: 0.04,
            learning_rate: 0.01,
            samples_per_step: 8,
            steps: 100,
            temperature: 1.0,
        }
    }
}

/// `(1/N) Σ_n ρ_n R_n − β · KL(π_θ ‖ π_old)` with trajectory-level ratios
/// `ρ_n = π_θ(o_n)/π_old(o_n)`, and its gradient.
pub fn rlhf_objective(
    params: &PolicyParams,
    old: &PolicyParams,
    samples: &[Trajectory],
    returns: &[f64],
    kl_weight: f64,
    mdp: &Mdp,
) -> Result<(f64, Vec<f64>, f64)> {
    let n = samples.len() as f64;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let (surrogate, mut grad) = nn::par_accumulate(&idx, params.len(), |&i, g| {
        let t = &samples[i];
        let old_lp: f64 = t.action_logprobs().iter().sum();
        let mut ctx = t.question.clone();
        ctx.push(mdp.vocab.step_delimiter());
        let mut new_lp = 0.0;
        for a in t.actions() {
            new_lp += policy::action_logprob_in(params, &ctx, a);
            ctx.extend_from_slice(a.tokens());
        }
        let r = (new_lp - old_lp).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp();
        if returns[i] != 0.0 {
            let mut ctx = t.question.clone();
            ctx.push(mdp.vocab.step_delimiter());
            for a in t.actions() {
                policy::accumulate_action_grad(params, &ctx, a, returns[i] * r / n, g);
                ctx.extend_from_slice(a.tokens());
            }
        }
        r * returns[i] / n
    });
    let contexts: Vec<Vec<TokenId>> = samples
        .iter()
        .flat_map(|t| {
            let mut ctx = t.question.clone();
            ctx.push(mdp.vocab.step_delimiter());
            let mut out = Vec::new();
            for &tok in t.actions().flat_map(|a| a.tokens()) {
                out.push(ctx.clone());
                ctx.push(tok);
            }
            out
        })
        .collect();
    let (kl, kl_grad) = if kl_weight > 0.0 {
        kl_and_grad(params, old, &contexts)
    } else {
        (0.0, vec![0.0; params.len()])
    };
    nn::axpy(&mut grad, -kl_weight, &kl_grad);
    let value = surrogate - kl_weight * kl;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "RLHF objective",
            detail: format!("{value}"),
        });
    }
    Ok((value, grad, kl))
}

/// Trajectory-level RLHF baseline: final-answer reward only, KL to the
/// pre-update policy. Emits the same metrics rows as [`grpo_update`].
pub fn ppo_rlhf_baseline(
    params: &PolicyParams,
    instances: &[TaskInstance],
    cfg: &RlhfConfig,
    reward: &dyn RewardModel,
    mdp: &Mdp,
    seed: Seed,
) -> Result<(PolicyParams, Vec<GroupMetrics>)> {
    if instances.is_empty() {
        return Err(Error::invalid("ppo_rlhf_baseline needs instances"));
    }
    if !(cfg.learning_rate > 0.0 && cfg.temperature > 0.0) || cfg.samples_per_step == 0 {
        return Err(Error::config("rlhf", "learning_rate, samples_per_step and temperature must be positive"));
    }
    let mut p = params.clone();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut shuffle_rng = seed.derive("question-order").rng();
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if step % instances.len() == 0 {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        }
        let inst = &instances[order[step % instances.len()]];
        let old = p.clone();
        let base = seed.derive("rlhf").child(step as u64);
        let samples: Vec<Trajectory> = (0..cfg.samples_per_step)
            .into_par_iter()
            .map(|i| {
                let mut rng = base.child(i as u64).rng();
                policy::rollout(&old, &inst.question, None, Sampling::Temperature(cfg.temperature), mdp, &mut rng)
                    .map(|r| r.trajectory)
            })
            .collect::<Result<_>>()?;
        let returns: Vec<f64> = samples
            .iter()
            .map(|t| match t.final_state(mdp) {
                Ok(s) if s.is_terminal() => reward.state_reward(inst, &s, mdp),
                _ => 0.0,
            })
            .collect();
        let (value, grad, kl) = rlhf_objective(&p, &old, &samples, &returns, cfg.kl_weight, mdp)?;
        p.apply(cfg.learning_rate, &grad)?;
        let correct = samples
            .iter()
            .filter(|t| t.answer.as_ref().is_some_and(|a| verify_answer(inst, a, &mdp.vocab)))
            .count();
        metrics.push(GroupMetrics {
            group_index: step,
            mean_raw_reward: returns.iter().sum::<f64>() / returns.len() as f64,
            objective: value,
            kl,
            clip_fraction: 0.0,
            accuracy_estimate: correct as f64 / samples.len() as f64,
        });
    }
    Ok((p, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_example() {
        let n = normalize_rewards(&[vec![1.0, 2.0], vec![3.0]], 1e-8);
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        let got: Vec<f64> = n.rewards.iter().flatten().copied().collect();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let z = normalize_rewards(&[vec![0.5, 0.5], vec![0.5]], 1e-8);
        assert!(z.rewards.iter().flatten().all(|&r| r == 0.0));
    }

    #[test]
    fn advantage_example() {
        let a = advantages(&NormalizedGroup {
            rewards: vec![vec![0.5, -0.5]],
            mean: 0.0,
            std: 1.0,
        });
        assert_eq!(a, vec![vec![0.0, -0.5]]);
    }

    #[test]
    fn truncation_scores_below_a_wrong_answer() {
        use crate::tasks::{generate_instance, TaskReward};
        let mdp = Mdp::arithmetic();
        let rc = RewardConfig::default();
        let reward = TaskReward::dense(rc);
        let inst = generate_instance(crate::TaskKind::AdditionChain, 2, Seed(3), &mdp.vocab).unwrap();
        let wrong_step = Action::step(&mdp.vocab.parse("0 + 0 = 0 0").unwrap(), &mdp).unwrap();
        let mut cut = Trajectory::new(inst.question.clone());
        cut.steps = vec![wrong_step.clone()];
        cut.truncated = true;
        let mut wrong = cut.clone();
        wrong.truncated = false;
        wrong.answer = Some(Action::answer(&mdp.vocab.parse("0 0").unwrap(), &mdp).unwrap());
        let cut_r = output_rewards(&cut, &inst, &reward, rc.final_incorrect, &mdp).unwrap();
        let wrong_r = output_rewards(&wrong, &inst, &reward, rc.final_incorrect, &mdp).unwrap();
        assert_eq!(cut_r, vec![rc.step_incorrect + rc.final_incorrect]);
        assert_eq!(wrong_r, vec![rc.step_incorrect, rc.final_incorrect]);
        assert!(cut_r.iter().sum::<f64>() <= wrong_r.iter().sum::<f64>());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clipped_term(1.5, 1.0, 0.2), (1.2, true));
        assert_eq!(clipped_term(0.5, -1.0, 0.2), (-0.8, true));
        assert_eq!(clipped_term(1.0, 3.0, 0.2), (3.0, false));
    }

    #[test]
    fn ratio_identities() {
        assert_eq!(ratio_from_logprobs(-1.0, -1.0).unwrap().value, 1.0);
        let r = ratio_from_logprobs(-1.0 + 2f64.ln(), -1.0).unwrap();
        assert!((r.value - 2.0).abs() < 1e-12);
        let big = ratio_from_logprobs(0.0, -100.0).unwrap();
        assert!(big.clamped);
        assert_eq!(big.value, 20f64.exp());
        assert!(ratio_from_logprobs(0.0, f64::NEG_INFINITY).is_err());
    }
}
