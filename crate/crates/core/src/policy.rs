//! Autoregressive softmax policy over tokens.
//!
//! `π(a | s)` is the product of token conditionals along the action, so the
//! action distribution is sub-stochastic over the (infinite) action set.
//! Logged log-probabilities are always taken at temperature 1, whatever
//! temperature was used for sampling.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{transition, Action, Mdp, State, TokenId, TokenLogProb, Trajectory};
use crate::nn::{self, MlpShape};
use crate::seed::{Rng, Seed};

pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_INIT_SCALE: f64 = 0.01;

/// Policy network parameters. Always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: MlpShape,
    params: Vec<f64>,
}

fn check_finite(params: &[f64], what: &'static str) -> Result<()> {
    match params.iter().position(|p| !p.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite {
            what,
            detail: format!("entry {i} is {}", params[i]),
        }),
    }
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, window: usize, hidden: usize) -> Self {
        let shape = MlpShape::new(vocab_size, window, hidden, vocab_size);
        Self {
            params: vec![0.0; shape.param_count()],
            shape,
        }
    }

    /// Uniform in `[-scale, scale]`.
    pub fn random(vocab_size: usize, window: usize, hidden: usize, scale: f64, seed: Seed) -> Self {
        let shape = MlpShape::new(vocab_size, window, hidden, vocab_size);
        Self {
            params: shape.init_uniform(scale, seed),
            shape,
        }
    }

    pub fn from_parts(shape: MlpShape, params: Vec<f64>) -> Result<Self> {
        if shape.outputs != shape.vocab_size() {
            return Err(Error::invalid("policy head must have one output per token"));
        }
        if params.len() != shape.param_count() {
            return Err(Error::invalid(format!(
                "{} parameters, architecture implies {}",
                params.len(),
                shape.param_count()
            )));
        }
        check_finite(&params, "policy parameter")?;
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn window(&self) -> usize {
        self.shape.window
    }

    pub fn vocab_size(&self) -> usize {
        self.shape.vocab_size()
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

    /// `θ += step · direction`, rejected if any entry becomes non-finite.
    pub fn apply(&mut self, step: f64, direction: &[f64]) -> Result<()> {
        let mut next = self.params.clone();
        nn::axpy(&mut next, step, direction);
        check_finite(&next, "policy parameter after update")?;
        self.params = next;
        Ok(())
    }

    /// Largest absolute parameter difference.
    pub fn max_abs_diff(&self, other: &PolicyParams) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn logits(&self, context: &[TokenId]) -> Vec<f64> {
        let active = self.shape.encode(context);
        self.shape.forward(&self.params, &active).output
    }

    pub fn distribution(&self, context: &[TokenId]) -> Vec<f64> {
        nn::softmax(&self.logits(context))
    }

    pub fn log_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        nn::log_softmax(&self.logits(context))
    }

    /// `softmax(logits / T)`.
    pub fn distribution_at(&self, context: &[TokenId], temperature: f64) -> Vec<f64> {
        let z: Vec<f64> = self.logits(context).iter().map(|l| l / temperature).collect();
        nn::softmax(&z)
    }

    /// Argmax token, ties to the lowest id.
    pub fn argmax(&self, context: &[TokenId]) -> TokenId {
        let logits = self.logits(context);
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        TokenId(best as u16)
    }

    /// Adds `scale · ∇ log p(next | context)` to `grad`; returns the log-prob.
    pub fn accumulate_token_grad(
        &self,
        context: &[TokenId],
        next: TokenId,
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let active = self.shape.encode(context);
        let act = self.shape.forward(&self.params, &active);
        let logp = nn::log_softmax(&act.output);
        let mut d: Vec<f64> = logp.iter().map(|l| -l.exp()).collect();
        d[next.index()] += 1.0;
        self.shape.backward(&self.params, &active, &act, &d, scale, grad);
        logp[next.index()]
    }
}

impl TokenLogProb for PolicyParams {
    fn token_logprob(&self, context: &[TokenId], next: TokenId) -> f64 {
        self.log_distribution(context)[next.index()]
    }
}

/// Next-token distribution at `state`.
pub fn token_distribution(params: &PolicyParams, state: &State) -> Result<Vec<f64>> {
    if state.is_terminal() {
        return Err(Error::TerminalState);
    }
    Ok(params.distribution(state.tokens()))
}

/// One sampled action with its temperature-1 token log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    pub action: Action,
    pub token_logprobs: Vec<f64>,
    /// The step hit its token budget and was closed with a forced delimiter.
    pub truncated: bool,
    pub policy_evals: usize,
}

/// How tokens are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
}

impl Sampling {
    pub fn validate(self) -> Result<()> {
        match self {
            Sampling::Temperature(t) if !(t > 0.0 && t.is_finite()) => {
                Err(Error::invalid(format!("temperature must be positive, got {t}")))
            }
            _ => Ok(()),
        }
    }
}

fn choose(params: &PolicyParams, context: &[TokenId], sampling: Sampling, rng: &mut Rng) -> (TokenId, f64) {
    let logits = params.logits(context);
    let logp = nn::log_softmax(&logits);
    let tok = match sampling {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        }
        Sampling::Temperature(t) => {
            let probs = if t == 1.0 {
                logp.iter().map(|l| l.exp()).collect()
            } else {
                nn::softmax(&logits.iter().map(|l| l / t).collect::<Vec<_>>())
            };
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    (TokenId(tok as u16), logp[tok])
}

/// Generates one action after `context`, with at most `budget` tokens.
pub fn sample_action_in(
    params: &PolicyParams,
    context: &[TokenId],
    sampling: Sampling,
    budget: usize,
    mdp: &Mdp,
    rng: &mut Rng,
) -> Result<SampledAction> {
    sampling.validate()?;
    if budget == 0 {
        return Err(Error::invalid("action token budget is zero"));
    }
    let vocab = &mdp.vocab;
    let mut ctx = context.to_vec();
    let mut tokens = Vec::new();
    let mut lps = Vec::new();
    let mut evals = 0;
    let mut truncated = false;
    loop {
        if tokens.len() + 1 == budget {
            // last slot: only a terminator fits
            let (tok, lp) = choose(params, &ctx, sampling, rng);
            evals += 1;
            if vocab.is_terminator(tok) {
                tokens.push(tok);
                lps.push(lp);
            } else {
                let d = vocab.step_delimiter();
                tokens.push(d);
                lps.push(params.log_distribution(&ctx)[d.index()]);
                truncated = true;
            }
            break;
        }
        let (tok, lp) = choose(params, &ctx, sampling, rng);
        evals += 1;
        tokens.push(tok);
        lps.push(lp);
        ctx.push(tok);
        if vocab.is_terminator(tok) {
            break;
        }
    }
    Ok(SampledAction {
        action: Action::new(tokens, mdp)?,
        token_logprobs: lps,
        truncated,
        policy_evals: evals,
    })
}

/// Samples the next action from `state`.
pub fn sample_action(
    params: &PolicyParams,
    state: &State,
    temperature: f64,
    mdp: &Mdp,
    rng: &mut Rng,
) -> Result<SampledAction> {
    if state.is_terminal() {
        return Err(Error::TerminalState);
    }
    let budget = action_budget(state.len(), mdp)?;
    sample_action_in(params, state.tokens(), Sampling::Temperature(temperature), budget, mdp, rng)
}

/// Argmax token chain from `state`.
pub fn greedy_action(params: &PolicyParams, state: &State, mdp: &Mdp) -> Result<SampledAction> {
    if state.is_terminal() {
        return Err(Error::TerminalState);
    }
    let budget = action_budget(state.len(), mdp)?;
    // the rng is never consulted in greedy mode
    let mut rng = Seed(0).rng();
    sample_action_in(params, state.tokens(), Sampling::Greedy, budget, mdp, &mut rng)
}

fn action_budget(state_len: usize, mdp: &Mdp) -> Result<usize> {
    let room = mdp.limits.max_context_tokens.saturating_sub(state_len);
    let budget = room.min(mdp.limits.max_step_tokens);
    if budget == 0 {
        Err(Error::ContextOverflow {
            len: state_len + 1,
            limit: mdp.limits.max_context_tokens,
        })
    } else {
        Ok(budget)
    }
}

/// `Σ log p(a_j | context, a_<j)`.
pub fn action_logprob_in(params: &PolicyParams, context: &[TokenId], action: &Action) -> f64 {
    let mut ctx = context.to_vec();
    let mut total = 0.0;
    for &t in action.tokens() {
        total += params.token_logprob(&ctx, t);
        ctx.push(t);
    }
    total
}

pub fn action_logprob(params: &PolicyParams, state: &State, action: &Action) -> f64 {
    action_logprob_in(params, state.tokens(), action)
}

/// Adds `scale · ∇ log π(action | context)` to `grad`; returns the log-prob.
pub fn accumulate_action_grad(
    params: &PolicyParams,
    context: &[TokenId],
    action: &Action,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let mut ctx = context.to_vec();
    let mut total = 0.0;
    for &t in action.tokens() {
        total += params.accumulate_token_grad(&ctx, t, scale, grad);
        ctx.push(t);
    }
    total
}

pub fn grad_action_logprob(params: &PolicyParams, state: &State, action: &Action) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    accumulate_action_grad(params, state.tokens(), action, 1.0, &mut g);
    g
}

/// A completed rollout and what it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub policy_evals: usize,
}

/// Rolls the policy out from `Q`. With a `hint`, the policy conditions on
/// `hint` in place of `Q ;` but the trajectory records only `Q`.
pub fn rollout(
    params: &PolicyParams,
    question: &[TokenId],
    hint: Option<&[TokenId]>,
    sampling: Sampling,
    mdp: &Mdp,
    rng: &mut Rng,
) -> Result<Rollout> {
    sampling.validate()?;
    let mut traj = Trajectory::new(question.to_vec());
    let mut state = State::initial(question, &mdp.vocab);
    let mut ctx: Vec<TokenId> = match hint {
        Some(h) => h.to_vec(),
        None => state.tokens().to_vec(),
    };
    let mut evals = 0;
    for _ in 0..mdp.limits.max_actions {
        let Ok(budget) = action_budget(state.len(), mdp) else {
            traj.truncated = true;
            break;
        };
        let s = sample_action_in(params, &ctx, sampling, budget, mdp, rng)?;
        evals += s.policy_evals;
        traj.truncated |= s.truncated;
        state = transition(&state, &s.action, &mdp.limits)?;
        ctx.extend_from_slice(s.action.tokens());
        traj.token_logprobs.extend(s.token_logprobs);
        if s.action.is_final() {
            traj.answer = Some(s.action);
            break;
        }
        traj.steps.push(s.action);
    }
    if traj.answer.is_none() {
        traj.truncated = true;
    }
    Ok(Rollout {
        trajectory: traj,
        policy_evals: evals,
    })
}

pub fn greedy_rollout(params: &PolicyParams, question: &[TokenId], mdp: &Mdp) -> Result<Rollout> {
    let mut rng = Seed(0).rng();
    rollout(params, question, None, Sampling::Greedy, mdp, &mut rng)
}

/// Supervised (cross-entropy) training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Trajectories per gradient step; 0 means the full dataset.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{key}.learning_rate"), "must be > 0"));
        }
        Ok(())
    }
}

/// Mean negative joint log-likelihood of the generated tokens and its gradient.
pub fn nll_and_grad(params: &PolicyParams, batch: &[&Trajectory], mdp: &Mdp) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    let (lp, g) = nn::par_accumulate(batch, params.len(), |traj, grad| {
        let mut ctx = traj.question.clone();
        ctx.push(mdp.vocab.step_delimiter());
        let mut total = 0.0;
        for a in traj.actions() {
            total += accumulate_action_grad(params, &ctx, a, 1.0, grad);
            ctx.extend_from_slice(a.tokens());
        }
        total
    });
    // ∇(−mean log p) = −mean ∇ log p
    (-lp / n, g.into_iter().map(|x| -x / n).collect())
}

/// Plain gradient descent on the mean negative log-likelihood of the
/// generated tokens; question tokens only condition. Returns the updated
/// parameters and the mean pre-step loss of each epoch.
pub fn supervised_update(
    params: &PolicyParams,
    dataset: &[Trajectory],
    cfg: &SupervisedConfig,
    mdp: &Mdp,
) -> Result<(PolicyParams, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("supervised_update needs a non-empty dataset"));
    }
    cfg.validate("supervised")?;
    let mut p = params.clone();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let bs = if cfg.batch_size == 0 {
        dataset.len()
    } else {
        cfg.batch_size.min(dataset.len())
    };
    let mut rng = Seed(cfg.seed).derive("supervised-shuffle").rng();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if bs < dataset.len() {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        }
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(bs) {
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grad) = nll_and_grad(&p, &batch, mdp);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "supervised loss",
                    detail: format!("epoch {epoch}, batch {batches}: {loss}"),
                });
            }
            p.apply(-cfg.learning_rate, &grad)?;
            sum += loss;
            batches += 1;
        }
        losses.push(sum / batches as f64);
    }
    Ok((p, losses))
}
