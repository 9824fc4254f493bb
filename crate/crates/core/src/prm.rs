//! Process reward model: a step-correctness classifier trained with binary
//! cross-entropy, or a state-value function trained on Bellman targets.
//! Also the exact dynamic-programming value oracle used to audit it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{transition, Action, Mdp, State, TokenId};
use crate::nn::{self, MlpShape};
use crate::policy::{self, PolicyParams, Sampling};
use crate::seed::{Rng, Seed};
use crate::tasks::{oracle_action, ActionUniverse, RewardModel, TaskInstance};

pub const CLAMP: f64 = 1e-7;
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// Sigmoid output: probability that the last step is correct.
    Classifier,
    /// Linear output: state value.
    Td,
}

/// Anything that scores states.
pub trait StateValue: Sync {
    fn value(&self, state: &State) -> f64;
}

/// Value network with a single scalar head. The mode is fixed at creation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueParams {
    mode: ValueMode,
    shape: MlpShape,
    params: Vec<f64>,
}

impl ValueParams {
    pub fn zeros(mode: ValueMode, vocab_size: usize, window: usize, hidden: usize) -> Self {
        let shape = MlpShape::new(vocab_size, window, hidden, 1);
        Self {
            mode,
            params: vec![0.0; shape.param_count()],
            shape,
        }
    }

    pub fn random(
        mode: ValueMode,
        vocab_size: usize,
        window: usize,
        hidden: usize,
        scale: f64,
        seed: Seed,
    ) -> Self {
        let shape = MlpShape::new(vocab_size, window, hidden, 1);
        Self {
            mode,
            params: shape.init_uniform(scale, seed),
            shape,
        }
    }

    pub fn from_parts(mode: ValueMode, shape: MlpShape, params: Vec<f64>) -> Result<Self> {
        if shape.outputs != 1 {
            return Err(Error::invalid("value head must have a single output"));
        }
        if params.len() != shape.param_count() {
            return Err(Error::invalid(format!(
                "{} parameters, architecture implies {}",
                params.len(),
                shape.param_count()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                what: "value parameter",
                detail: format!("entry {i}"),
            });
        }
        Ok(Self { mode, shape, params })
    }

    pub fn mode(&self) -> ValueMode {
        self.mode
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn apply(&mut self, step: f64, direction: &[f64]) -> Result<()> {
        let mut next = self.params.clone();
        nn::axpy(&mut next, step, direction);
        if let Some(i) = next.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                what: "value parameter after update",
                detail: format!("entry {i}"),
            });
        }
        self.params = next;
        Ok(())
    }

    /// Pre-activation output.
    pub fn raw(&self, tokens: &[TokenId]) -> f64 {
        let active = self.shape.encode(tokens);
        self.shape.forward(&self.params, &active).output[0]
    }

    pub fn score_tokens(&self, tokens: &[TokenId]) -> f64 {
        match self.mode {
            ValueMode::Classifier => nn::sigmoid(self.raw(tokens)),
            ValueMode::Td => self.raw(tokens),
        }
    }
}

/// Classifier mode: probability of correct in (0,1). TD mode: value estimate.
pub fn prm_score(params: &ValueParams, state: &State) -> f64 {
    params.score_tokens(state.tokens())
}

impl StateValue for ValueParams {
    fn value(&self, state: &State) -> f64 {
        prm_score(self, state)
    }
}

/// State reached by a step (or answer) together with its oracle label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledStepRecord {
    pub state: State,
    pub label: bool,
    pub is_final: bool,
    pub instance_id: String,
}

fn require_mode(params: &ValueParams, mode: ValueMode) -> Result<()> {
    if params.mode != mode {
        return Err(Error::invalid(format!(
            "value model is in {:?} mode, expected {mode:?}",
            params.mode
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy and its gradient. Predictions are clamped to
/// `[1e-7, 1 - 1e-7]`; the gradient is zero where the clamp binds.
pub fn prm_bce_loss(params: &ValueParams, batch: &[LabeledStepRecord]) -> Result<(f64, Vec<f64>)> {
    require_mode(params, ValueMode::Classifier)?;
    if batch.is_empty() {
        return Err(Error::invalid("prm_bce_loss needs a non-empty batch"));
    }
    let n = batch.len() as f64;
    let (sum, grad) = nn::par_accumulate(batch, params.len(), |rec, g| {
        let active = params.shape.encode(rec.state.tokens());
        let act = params.shape.forward(&params.params, &active);
        let p = nn::sigmoid(act.output[0]);
        let pc = p.clamp(CLAMP, 1.0 - CLAMP);
        let v = if rec.label { 1.0 } else { 0.0 };
        let loss = -(v * pc.ln() + (1.0 - v) * (1.0 - pc).ln());
        if pc == p {
            // d/dz of BCE(sigmoid(z)) is p − v
            params
                .shape
                .backward(&params.params, &active, &act, &[p - v], 1.0 / n, g);
        }
        loss
    });
    let loss = sum / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "BCE loss",
            detail: format!("{loss}"),
        });
    }
    Ok((loss, grad))
}

/// Gradient-descent settings shared by both training paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrmTrainConfig {
    pub learning_rate: f64,
    /// Classifier: passes over the data. TD: target refreshes.
    pub epochs: usize,
    /// TD only: gradient steps per frozen target set.
    pub steps_per_sweep: usize,
    /// Records per gradient step; 0 means all.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PrmTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 50,
            steps_per_sweep: 20,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl PrmTrainConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{key}.learning_rate"), "must be > 0"));
        }
        if self.steps_per_sweep == 0 {
            return Err(Error::config(format!("{key}.steps_per_sweep"), "must be ≥ 1"));
        }
        Ok(())
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if batch_size == 0 || batch_size >= n {
        return vec![order];
    }
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Gradient descent on the BCE loss. Returns the parameters and the mean
/// pre-step loss per epoch.
pub fn train_prm_classifier(
    params: &ValueParams,
    dataset: &[LabeledStepRecord],
    cfg: &PrmTrainConfig,
) -> Result<(ValueParams, Vec<f64>)> {
    require_mode(params, ValueMode::Classifier)?;
    if dataset.is_empty() {
        return Err(Error::invalid("train_prm_classifier needs records"));
    }
    cfg.validate("prm")?;
    let positives = dataset.iter().filter(|r| r.label).count();
    if positives == 0 || positives == dataset.len() {
        log::warn!(
            "PRM dataset has a single class ({positives} positive of {})",
            dataset.len()
        );
    }
    let mut p = params.clone();
    let mut rng = Seed(cfg.seed).derive("prm-shuffle").rng();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let bs = batches(dataset.len(), cfg.batch_size, &mut rng);
        for idx in &bs {
            let batch: Vec<LabeledStepRecord> = idx.iter().map(|&i| dataset[i].clone()).collect();
            let (loss, grad) = prm_bce_loss(&p, &batch)?;
            p.apply(-cfg.learning_rate, &grad)?;
            sum += loss;
        }
        losses.push(sum / bs.len() as f64);
    }
    Ok((p, losses))
}

/// `r(s)` if terminal, else `r(s) + γ · max_a V(s + a)` over the candidates.
pub fn bellman_backup(
    values: &dyn StateValue,
    state: &State,
    candidates: &[Action],
    reward: f64,
    gamma: f64,
    mdp: &Mdp,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    if state.is_terminal() {
        return Ok(reward);
    }
    let best = candidates
        .iter()
        .filter_map(|a| transition(state, a, &mdp.limits).ok())
        .map(|s| values.value(&s))
        .fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return Err(Error::invalid("bellman_backup needs a candidate at a non-terminal state"));
    }
    Ok(reward + gamma * best)
}

/// A state with its reward and the successors its backup maximizes over.
#[derive(Debug, Clone, PartialEq)]
pub struct TdSample {
    pub state: State,
    pub reward: f64,
    pub successors: Vec<State>,
}

impl TdSample {
    fn target(&self, values: &dyn StateValue, gamma: f64) -> f64 {
        if self.state.is_terminal() || self.successors.is_empty() {
            return self.reward;
        }
        let best = self
            .successors
            .iter()
            .map(|s| values.value(s))
            .fold(f64::NEG_INFINITY, f64::max);
        self.reward + gamma * best
    }
}

fn sample_for(
    inst: &TaskInstance,
    state: State,
    actions: &[Action],
    reward: &dyn RewardModel,
    mdp: &Mdp,
) -> TdSample {
    let mut successors: Vec<State> = Vec::new();
    if !state.is_terminal() {
        for a in actions {
            if let Ok(s) = transition(&state, a, &mdp.limits) {
                if !successors.contains(&s) {
                    successors.push(s);
                }
            }
        }
    }
    TdSample {
        reward: reward.state_reward(inst, &state, mdp),
        state,
        successors,
    }
}

/// Every state of the instance's tree, with universe actions as candidates.
pub fn td_samples_from_universe(
    inst: &TaskInstance,
    universe: &dyn ActionUniverse,
    reward: &dyn RewardModel,
    mdp: &Mdp,
    bound: usize,
) -> Result<Vec<TdSample>> {
    let mut out = Vec::new();
    let mut stack = vec![State::initial(&inst.question, &mdp.vocab)];
    while let Some(s) = stack.pop() {
        if out.len() >= bound {
            return Err(Error::TreeTooLarge {
                nodes: out.len() + 1 + stack.len(),
                bound,
            });
        }
        let actions = universe.actions(inst, &s, mdp);
        let sample = sample_for(inst, s, &actions, reward, mdp);
        stack.extend(sample.successors.iter().cloned());
        out.push(sample);
    }
    Ok(out)
}

/// Candidate proposals for TD targets: `m` policy samples, optionally plus
/// the oracle action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub m: usize,
    pub temperature: f64,
    pub include_oracle: bool,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            m: 8,
            temperature: 1.0,
            include_oracle: true,
        }
    }
}

/// Policy-proposed candidate actions at `state`, deduplicated.
pub fn propose_candidates(
    policy: &PolicyParams,
    inst: &TaskInstance,
    state: &State,
    cfg: &ProposalConfig,
    mdp: &Mdp,
    rng: &mut Rng,
) -> Result<Vec<Action>> {
    if cfg.m == 0 {
        return Err(Error::invalid("candidate proposal width M must be ≥ 1"));
    }
    let mut out: Vec<Action> = Vec::new();
    if state.is_terminal() {
        return Ok(out);
    }
    for _ in 0..cfg.m {
        let s = policy::sample_action(policy, state, cfg.temperature, mdp, rng)?;
        if !out.contains(&s.action) {
            out.push(s.action);
        }
    }
    if cfg.include_oracle {
        let o = oracle_action(inst, state.depth(), mdp);
        if !out.contains(&o) {
            out.push(o);
        }
    }
    Ok(out)
}

/// TD samples over the states visited by policy rollouts; each state gets
/// its own proposal set.
pub fn td_samples_from_policy(
    policy: &PolicyParams,
    instances: &[TaskInstance],
    rollouts_per_instance: usize,
    proposal: &ProposalConfig,
    reward: &dyn RewardModel,
    mdp: &Mdp,
    seed: Seed,
) -> Result<Vec<TdSample>> {
    let mut out = Vec::new();
    let mut seen: HashMap<Vec<TokenId>, ()> = HashMap::new();
    for (k, inst) in instances.iter().enumerate() {
        let mut rng = seed.child(k as u64).rng();
        let mut states = Vec::new();
        for _ in 0..rollouts_per_instance {
            let r = policy::rollout(
                policy,
                &inst.question,
                None,
                Sampling::Temperature(proposal.temperature),
                mdp,
                &mut rng,
            )?;
            states.extend(r.trajectory.states(mdp)?);
        }
        states.extend(crate::tasks::oracle_trajectory(inst, mdp).states(mdp)?);
        for s in states {
            if seen.insert(s.tokens().to_vec(), ()).is_some() {
                continue;
            }
            let actions = propose_candidates(policy, inst, &s, proposal, mdp, &mut rng)?;
            let sample = sample_for(inst, s, &actions, reward, mdp);
            // successors are states too; terminal ones train the reward level
            for succ in &sample.successors {
                if succ.is_terminal() && seen.insert(succ.tokens().to_vec(), ()).is_none() {
                    out.push(sample_for(inst, succ.clone(), &[], reward, mdp));
                }
            }
            out.push(sample);
        }
    }
    Ok(out)
}

/// Mean squared TD error against fixed `targets`, and its gradient.
pub fn td_loss(params: &ValueParams, states: &[State], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    require_mode(params, ValueMode::Td)?;
    if states.len() != targets.len() || states.is_empty() {
        return Err(Error::invalid("td_loss needs one target per state"));
    }
    let n = states.len() as f64;
    let idx: Vec<usize> = (0..states.len()).collect();
    let (sum, grad) = nn::par_accumulate(&idx, params.len(), |&i, g| {
        let active = params.shape.encode(states[i].tokens());
        let act = params.shape.forward(&params.params, &active);
        let err = act.output[0] - targets[i];
        params
            .shape
            .backward(&params.params, &active, &act, &[2.0 * err / n], 1.0, g);
        err * err
    });
    Ok((sum / n, grad))
}

/// Semi-gradient TD: each sweep freezes targets from the current parameters,
/// then takes `steps_per_sweep` descent steps. Returns the parameters and the
/// TD loss at the start of each sweep.
pub fn train_prm_td(
    params: &ValueParams,
    samples: &[TdSample],
    gamma: f64,
    cfg: &PrmTrainConfig,
) -> Result<(ValueParams, Vec<f64>)> {
    require_mode(params, ValueMode::Td)?;
    if samples.is_empty() {
        return Err(Error::invalid("train_prm_td needs states"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config("prm.gamma", "must lie in [0, 1]"));
    }
    cfg.validate("prm")?;
    let mut p = params.clone();
    let mut rng = Seed(cfg.seed).derive("td-shuffle").rng();
    let states: Vec<State> = samples.iter().map(|s| s.state.clone()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for sweep in 0..cfg.epochs {
        let frozen = p.clone();
        let targets: Vec<f64> = samples.iter().map(|s| s.target(&frozen, gamma)).collect();
        for step in 0..cfg.steps_per_sweep {
            for (b, idx) in batches(states.len(), cfg.batch_size, &mut rng).iter().enumerate() {
                let bs: Vec<State> = idx.iter().map(|&i| states[i].clone()).collect();
                let bt: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
                let (loss, grad) = td_loss(&p, &bs, &bt)?;
                if step == 0 && b == 0 {
                    losses.push(if idx.len() == states.len() {
                        loss
                    } else {
                        td_loss(&p, &states, &targets)?.0
                    });
                }
                if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                    return Err(Error::Divergence(format!(
                        "TD loss {loss} at sweep {sweep}, step {step}"
                    )));
                }
                p.apply(-cfg.learning_rate, &grad)?;
            }
        }
    }
    Ok((p, losses))
}

/// Exact values keyed by state tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValueTable {
    values: HashMap<Vec<TokenId>, f64>,
}

impl ValueTable {
    pub fn get(&self, state: &State) -> Option<f64> {
        self.values.get(state.tokens()).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<TokenId>, &f64)> {
        self.values.iter()
    }
}

impl StateValue for ValueTable {
    /// Unknown states score negative infinity.
    fn value(&self, state: &State) -> f64 {
        self.get(state).unwrap_or(f64::NEG_INFINITY)
    }
}

/// Exact `V*` over the full tree spanned by `universe`, by post-order DP.
pub fn brute_force_values(
    inst: &TaskInstance,
    universe: &dyn ActionUniverse,
    reward: &dyn RewardModel,
    gamma: f64,
    mdp: &Mdp,
    bound: usize,
) -> Result<ValueTable> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    let mut table = ValueTable::default();
    let mut nodes = 0usize;
    #[allow(clippy::too_many_arguments)]
    fn visit(
        s: &State,
        inst: &TaskInstance,
        universe: &dyn ActionUniverse,
        reward: &dyn RewardModel,
        gamma: f64,
        mdp: &Mdp,
        bound: usize,
        nodes: &mut usize,
        table: &mut ValueTable,
    ) -> Result<f64> {
        *nodes += 1;
        if *nodes > bound {
            return Err(Error::TreeTooLarge {
                nodes: *nodes,
                bound,
            });
        }
        let r = reward.state_reward(inst, s, mdp);
        let mut best = f64::NEG_INFINITY;
        if !s.is_terminal() {
            for a in universe.actions(inst, s, mdp) {
                if let Ok(next) = transition(s, &a, &mdp.limits) {
                    let v = visit(&next, inst, universe, reward, gamma, mdp, bound, nodes, table)?;
                    best = best.max(v);
                }
            }
        }
        let v = if best == f64::NEG_INFINITY {
            r
        } else {
            r + gamma * best
        };
        table.values.insert(s.tokens().to_vec(), v);
        Ok(v)
    }
    let root = State::initial(&inst.question, &mdp.vocab);
    visit(&root, inst, universe, reward, gamma, mdp, bound, &mut nodes, &mut table)?;
    Ok(table)
}

/// Largest `|V(s) − (r(s) + γ max V(s'))|` over every state of the tree.
pub fn bellman_residual(
    table: &ValueTable,
    inst: &TaskInstance,
    universe: &dyn ActionUniverse,
    reward: &dyn RewardModel,
    gamma: f64,
    mdp: &Mdp,
) -> f64 {
    let mut worst = 0.0f64;
    let mut stack = vec![State::initial(&inst.question, &mdp.vocab)];
    while let Some(s) = stack.pop() {
        let r = reward.state_reward(inst, &s, mdp);
        let mut best = f64::NEG_INFINITY;
        if !s.is_terminal() {
            for a in universe.actions(inst, &s, mdp) {
                if let Ok(next) = transition(&s, &a, &mdp.limits) {
                    best = best.max(table.value(&next));
                    stack.push(next);
                }
            }
        }
        let target = if best == f64::NEG_INFINITY {
            r
        } else {
            r + gamma * best
        };
        worst = worst.max((table.value(&s) - target).abs());
    }
    worst
}
