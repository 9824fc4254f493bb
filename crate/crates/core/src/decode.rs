//! Inference-time search: greedy, best-of-N with reranking, step-level beam
//! search and PUCT tree search with PRM leaf values.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{transition, Action, Mdp, State, Trajectory};
use crate::policy::{self, PolicyParams, Sampling};
use crate::prm::StateValue;
use crate::seed::{Rng, Seed};
use crate::tasks::{verify_answer, ActionUniverse, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Greedy,
    BestOfN,
    Beam,
    Mcts,
    /// Best-of-`runs` over independent tree searches.
    BestOfMcts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// PRM score of the final state.
    #[default]
    Prm,
    /// Exact answer check, PRM score as tie-break.
    Verifier,
}

/// Decode-time knobs. `budget` is N, the beam width or the simulation count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeBudget {
    pub strategy: StrategyKind,
    pub budget: usize,
    pub c_puct: f64,
    pub expansion_width: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub scorer: ScorerKind,
    pub runs: usize,
}

impl Default for DecodeBudget {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Greedy,
            budget: 1,
            c_puct: 1.0,
            expansion_width: 4,
            temperature: 1.0,
            lambda: 0.5,
            scorer: ScorerKind::Prm,
            runs: 1,
        }
    }
}

impl DecodeBudget {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::config("decode.budget", "must be ≥ 1"));
        }
        if !(self.c_puct >= 0.0 && self.c_puct.is_finite()) {
            return Err(Error::config("decode.c_puct", "must be ≥ 0"));
        }
        if self.expansion_width == 0 {
            return Err(Error::config("decode.expansion_width", "must be ≥ 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("decode.temperature", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("decode.lambda", "must lie in [0, 1]"));
        }
        if self.runs == 0 {
            return Err(Error::config("decode.runs", "must be ≥ 1"));
        }
        Ok(())
    }

    /// Short label for reports, e.g. `mcts(64)`.
    pub fn label(&self) -> String {
        let name = match self.strategy {
            StrategyKind::Greedy => return "greedy".into(),
            StrategyKind::BestOfN => "best_of_n",
            StrategyKind::Beam => "beam",
            StrategyKind::Mcts => "mcts",
            StrategyKind::BestOfMcts => return format!("best_of_mcts({}x{})", self.runs, self.budget),
        };
        format!("{name}({})", self.budget)
    }
}

/// A decoded trajectory and what it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub trajectory: Trajectory,
    pub policy_evals: usize,
    pub prm_evals: usize,
    /// Search ended without reaching a terminal state on its own.
    pub search_incomplete: bool,
}

/// Counts evaluations of a wrapped scorer.
pub struct Counted<'a> {
    inner: &'a dyn StateValue,
    count: AtomicUsize,
}

impl<'a> Counted<'a> {
    pub fn new(inner: &'a dyn StateValue) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

impl StateValue for Counted<'_> {
    fn value(&self, state: &State) -> f64 {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.value(state)
    }
}

pub fn greedy_decode(params: &PolicyParams, inst: &TaskInstance, mdp: &Mdp) -> Result<DecodeResult> {
    let r = policy::greedy_rollout(params, &inst.question, mdp)?;
    Ok(DecodeResult {
        trajectory: r.trajectory,
        policy_evals: r.policy_evals,
        prm_evals: 0,
        search_incomplete: false,
    })
}

/// Fraction of instances whose greedy answer verifies.
pub fn greedy_accuracy(params: &PolicyParams, instances: &[TaskInstance], mdp: &Mdp) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::invalid("greedy_accuracy needs instances"));
    }
    let hits: usize = instances
        .par_iter()
        .map(|inst| {
            let d = greedy_decode(params, inst, mdp)?;
            Ok(usize::from(
                d.trajectory
                    .answer
                    .as_ref()
                    .is_some_and(|a| verify_answer(inst, a, &mdp.vocab)),
            ))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / instances.len() as f64)
}

/// How a strategy scores complete samples.
#[derive(Clone, Copy)]
pub enum Scorer<'a> {
    Prm(&'a dyn StateValue),
    /// Verifier first; the optional PRM breaks ties.
    Verifier(Option<&'a dyn StateValue>),
}

/// `n` samples on paired seeds (`seed.child(i)` for sample `i`), best by the
/// scorer, ties to the lowest index. Complete samples beat truncated ones.
pub fn best_of_n(
    params: &PolicyParams,
    scorer: Scorer<'_>,
    inst: &TaskInstance,
    n: usize,
    temperature: f64,
    mdp: &Mdp,
    seed: Seed,
) -> Result<DecodeResult> {
    if n == 0 {
        return Err(Error::invalid("best_of_n needs N ≥ 1"));
    }
    let mut policy_evals = 0;
    let mut prm_evals = 0;
    let mut best: Option<((bool, bool, f64), Trajectory)> = None;
    for i in 0..n {
        let mut rng = seed.child(i as u64).rng();
        let r = policy::rollout(params, &inst.question, None, Sampling::Temperature(temperature), mdp, &mut rng)?;
        policy_evals += r.policy_evals;
        let t = r.trajectory;
        let complete = t.answer.is_some();
        let state = t.final_state(mdp)?;
        let key = match scorer {
            Scorer::Prm(v) => {
                prm_evals += 1;
                (complete, true, v.value(&state))
            }
            Scorer::Verifier(v) => {
                let ok = t
                    .answer
                    .as_ref()
                    .is_some_and(|a| verify_answer(inst, a, &mdp.vocab));
                let s = match v {
                    Some(v) => {
                        prm_evals += 1;
                        v.value(&state)
                    }
                    None => 0.0,
                };
                (complete, ok, s)
            }
        };
        let better = match &best {
            None => true,
            Some((k, _)) => (key.0, key.1) > (k.0, k.1) || ((key.0, key.1) == (k.0, k.1) && key.2 > k.2),
        };
        if better {
            best = Some((key, t));
        }
    }
    let (_, trajectory) = best.expect("n ≥ 1");
    Ok(DecodeResult {
        trajectory,
        policy_evals,
        prm_evals,
        search_incomplete: false,
    })
}

/// Where candidate actions come from during search.
#[derive(Clone, Copy)]
pub enum Proposer<'a> {
    /// Up to `width` distinct policy samples plus the greedy action.
    Policy { width: usize, temperature: f64 },
    /// Every action of an enumerable universe.
    Universe(&'a dyn ActionUniverse),
    /// The greedy action alone.
    GreedyOnly,
}

/// A proposed action with its temperature-1 token log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub action: Action,
    pub token_logprobs: Vec<f64>,
    pub truncated: bool,
}

impl Proposal {
    pub fn logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

fn token_logprobs(params: &PolicyParams, state: &State, action: &Action) -> Vec<f64> {
    let mut ctx = state.tokens().to_vec();
    action
        .tokens()
        .iter()
        .map(|&t| {
            let lp = crate::mdp::TokenLogProb::token_logprob(params, &ctx, t);
            ctx.push(t);
            lp
        })
        .collect()
}

/// Candidate actions at `state`, deduplicated, in proposal order.
pub fn propose(
    params: &PolicyParams,
    proposer: Proposer<'_>,
    inst: &TaskInstance,
    state: &State,
    mdp: &Mdp,
    rng: &mut Rng,
    policy_evals: &mut usize,
) -> Result<Vec<Proposal>> {
    let mut out: Vec<Proposal> = Vec::new();
    if state.is_terminal() || state.depth() >= mdp.limits.max_actions {
        return Ok(out);
    }
    let push = |out: &mut Vec<Proposal>, p: Proposal| {
        if !out.iter().any(|q| q.action == p.action) {
            out.push(p);
        }
    };
    match proposer {
        Proposer::GreedyOnly | Proposer::Policy { .. } => {
            let g = match policy::greedy_action(params, state, mdp) {
                Ok(g) => g,
                Err(Error::ContextOverflow { .. }) => return Ok(out),
                Err(e) => return Err(e),
            };
            *policy_evals += g.policy_evals;
            push(
                &mut out,
                Proposal {
                    action: g.action,
                    token_logprobs: g.token_logprobs,
                    truncated: g.truncated,
                },
            );
            if let Proposer::Policy { width, temperature } = proposer {
                // distinct samples, with a bounded number of draws
                let mut draws = 0;
                while out.len() < width + 1 && draws < 4 * width {
                    draws += 1;
                    let s = policy::sample_action(params, state, temperature, mdp, rng)?;
                    *policy_evals += s.policy_evals;
                    push(
                        &mut out,
                        Proposal {
                            action: s.action,
                            token_logprobs: s.token_logprobs,
                            truncated: s.truncated,
                        },
                    );
                }
            }
        }
        Proposer::Universe(u) => {
            for a in u.actions(inst, state, mdp) {
                *policy_evals += a.len();
                let lps = token_logprobs(params, state, &a);
                push(
                    &mut out,
                    Proposal {
                        action: a,
                        token_logprobs: lps,
                        truncated: false,
                    },
                );
            }
        }
    }
    out.retain(|p| state.len() + p.action.len() <= mdp.limits.max_context_tokens);
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hyp {
    state: State,
    actions: Vec<Action>,
    lps: Vec<f64>,
    cum: f64,
    score: f64,
    truncated: bool,
}

fn to_trajectory(question: &[crate::mdp::TokenId], actions: &[Action], lps: &[f64], truncated: bool) -> Trajectory {
    let mut t = Trajectory::new(question.to_vec());
    for a in actions {
        if a.is_final() {
            t.answer = Some(a.clone());
        } else {
            t.steps.push(a.clone());
        }
    }
    t.token_logprobs = lps.to_vec();
    t.truncated = truncated || t.answer.is_none();
    t
}

/// Step-level beam search. Partial score is `λ · cumulative log-prob +
/// (1 − λ) · PRM(state)`; completed hypotheses leave the beam and the best
/// one is returned (ties to the earliest found).
#[allow(clippy::too_many_arguments)]
pub fn beam_search(
    params: &PolicyParams,
    prm: Option<&dyn StateValue>,
    inst: &TaskInstance,
    beam_width: usize,
    lambda: f64,
    proposer: Proposer<'_>,
    mdp: &Mdp,
    seed: Seed,
) -> Result<DecodeResult> {
    if beam_width == 0 {
        return Err(Error::invalid("beam width must be ≥ 1"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("λ = {lambda} outside [0, 1]")));
    }
    if lambda < 1.0 && prm.is_none() {
        return Err(Error::invalid("beam search with λ < 1 needs a PRM"));
    }
    let mut rng = seed.rng();
    let mut policy_evals = 0;
    let mut prm_evals = 0;
    let mut score = |s: &State, cum: f64| -> f64 {
        if lambda == 1.0 {
            cum
        } else {
            prm_evals += 1;
            lambda * cum + (1.0 - lambda) * prm.expect("checked").value(s)
        }
    };
    let root = State::initial(&inst.question, &mdp.vocab);
    let mut beam = vec![Hyp {
        score: 0.0,
        state: root,
        actions: vec![],
        lps: vec![],
        cum: 0.0,
        truncated: false,
    }];
    let mut done: Vec<Hyp> = Vec::new();
    let mut dead_ends: Vec<Hyp> = Vec::new();
    while !beam.is_empty() {
        let mut children = Vec::new();
        for h in &beam {
            let props = propose(params, proposer, inst, &h.state, mdp, &mut rng, &mut policy_evals)?;
            if props.is_empty() {
                dead_ends.push(h.clone());
                continue;
            }
            for p in props {
                let state = transition(&h.state, &p.action, &mdp.limits)?;
                let cum = h.cum + p.logprob();
                let mut actions = h.actions.clone();
                actions.push(p.action);
                let mut lps = h.lps.clone();
                lps.extend(&p.token_logprobs);
                let child = Hyp {
                    score: score(&state, cum),
                    state,
                    actions,
                    lps,
                    cum,
                    truncated: h.truncated || p.truncated,
                };
                if child.state.is_terminal() {
                    done.push(child);
                } else {
                    children.push(child);
                }
            }
        }
        // stable: equal scores keep proposal order
        children.sort_by(|a, b| b.score.total_cmp(&a.score));
        children.truncate(beam_width);
        beam = children;
    }
    let pick = |hs: &[Hyp]| -> Option<Hyp> {
        let mut best: Option<&Hyp> = None;
        for h in hs {
            if best.is_none_or(|b| h.score > b.score) {
                best = Some(h);
            }
        }
        best.cloned()
    };
    let (h, incomplete) = match pick(&done) {
        Some(h) => (h, false),
        None => (pick(&dead_ends).expect("root is a hypothesis"), true),
    };
    Ok(DecodeResult {
        trajectory: to_trajectory(&inst.question, &h.actions, &h.lps, h.truncated),
        policy_evals,
        prm_evals,
        search_incomplete: incomplete,
    })
}

/// One node of the search tree.
#[derive(Debug, Clone)]
pub struct SearchNode {
    pub state: State,
    pub parent: Option<usize>,
    pub action: Option<Action>,
    pub token_logprobs: Vec<f64>,
    pub truncated: bool,
    pub prior: f64,
    pub visit_count: usize,
    pub total_value: f64,
    pub children: Vec<usize>,
    pub expanded: bool,
}

impl SearchNode {
    pub fn mean_value(&self) -> f64 {
        self.total_value / self.visit_count.max(1) as f64
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }
}

/// Search tree after [`mcts_search`]; node 0 is the root.
#[derive(Debug, Clone)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
    pub policy_evals: usize,
    pub prm_evals: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MctsConfig {
    pub simulations: usize,
    pub c_puct: f64,
}

fn expand(
    tree: &mut SearchTree,
    node: usize,
    params: &PolicyParams,
    proposer: Proposer<'_>,
    inst: &TaskInstance,
    mdp: &Mdp,
    rng: &mut Rng,
) -> Result<()> {
    let state = tree.nodes[node].state.clone();
    let props = propose(params, proposer, inst, &state, mdp, rng, &mut tree.policy_evals)?;
    let z: f64 = props.iter().map(|p| p.logprob().exp()).sum();
    let n = props.len() as f64;
    for p in props {
        let child_state = transition(&state, &p.action, &mdp.limits)?;
        // priors normalized over the proposed set; uniform if all underflow
        let prior = if z > 0.0 { p.logprob().exp() / z } else { 1.0 / n };
        let id = tree.nodes.len();
        tree.nodes.push(SearchNode {
            state: child_state,
            parent: Some(node),
            action: Some(p.action),
            token_logprobs: p.token_logprobs,
            truncated: tree.nodes[node].truncated || p.truncated,
            prior,
            visit_count: 0,
            total_value: 0.0,
            children: vec![],
            expanded: false,
        });
        tree.nodes[node].children.push(id);
    }
    tree.nodes[node].expanded = true;
    Ok(())
}

fn select_child(tree: &SearchTree, node: usize, c_puct: f64) -> usize {
    let n = &tree.nodes[node];
    // unvisited children first, highest prior, then lowest index
    let mut first: Option<usize> = None;
    for &c in &n.children {
        if tree.nodes[c].visit_count == 0
            && first.is_none_or(|f| tree.nodes[c].prior > tree.nodes[f].prior)
        {
            first = Some(c);
        }
    }
    if let Some(c) = first {
        return c;
    }
    let sqrt_n = (n.visit_count as f64).sqrt();
    let mut best = n.children[0];
    let mut best_score = f64::NEG_INFINITY;
    for &c in &n.children {
        let ch = &tree.nodes[c];
        let u = ch.mean_value() + c_puct * ch.prior * sqrt_n / (1.0 + ch.visit_count as f64);
        if u > best_score {
            best_score = u;
            best = c;
        }
    }
    best
}

/// PUCT search. The root is expanded and evaluated first; every simulation
/// then walks to a leaf, evaluates it with `value`, expands it and adds the
/// leaf value to every node on its path.
#[allow(clippy::too_many_arguments)]
pub fn mcts_search(
    params: &PolicyParams,
    value: &dyn StateValue,
    inst: &TaskInstance,
    cfg: &MctsConfig,
    proposer: Proposer<'_>,
    mdp: &Mdp,
    seed: Seed,
) -> Result<SearchTree> {
    if cfg.simulations == 0 {
        return Err(Error::invalid("MCTS needs at least one simulation"));
    }
    let mut rng = seed.rng();
    let root_state = State::initial(&inst.question, &mdp.vocab);
    let mut tree = SearchTree {
        nodes: vec![SearchNode {
            state: root_state,
            parent: None,
            action: None,
            token_logprobs: vec![],
            truncated: false,
            prior: 1.0,
            visit_count: 0,
            total_value: 0.0,
            children: vec![],
            expanded: false,
        }],
        policy_evals: 0,
        prm_evals: 0,
    };
    let v0 = value.value(&tree.nodes[0].state);
    tree.prm_evals += 1;
    tree.nodes[0].visit_count = 1;
    tree.nodes[0].total_value = v0;
    expand(&mut tree, 0, params, proposer, inst, mdp, &mut rng)?;
    for _ in 0..cfg.simulations {
        let mut node = 0;
        while tree.nodes[node].expanded && !tree.nodes[node].children.is_empty() {
            node = select_child(&tree, node, cfg.c_puct);
        }
        let v = value.value(&tree.nodes[node].state);
        tree.prm_evals += 1;
        if !tree.nodes[node].expanded && !tree.nodes[node].is_terminal() {
            expand(&mut tree, node, params, proposer, inst, mdp, &mut rng)?;
        }
        let mut cur = Some(node);
        while let Some(c) = cur {
            tree.nodes[c].visit_count += 1;
            tree.nodes[c].total_value += v;
            cur = tree.nodes[c].parent;
        }
    }
    Ok(tree)
}

impl SearchTree {
    /// Robust-child path: most visits at each depth, ties to the lowest index.
    pub fn most_visited_path(&self) -> Vec<usize> {
        let mut path = vec![0];
        let mut node = 0;
        loop {
            let n = &self.nodes[node];
            let mut best: Option<usize> = None;
            for &c in &n.children {
                if self.nodes[c].visit_count > 0
                    && best.is_none_or(|b| self.nodes[c].visit_count > self.nodes[b].visit_count)
                {
                    best = Some(c);
                }
            }
            match best {
                Some(c) => {
                    path.push(c);
                    node = c;
                }
                None => return path,
            }
        }
    }
}

/// Tree search, then the most-visited path. A path that stops short of a
/// terminal state is completed greedily and flagged.
#[allow(clippy::too_many_arguments)]
pub fn mcts_decode(
    params: &PolicyParams,
    value: &dyn StateValue,
    inst: &TaskInstance,
    cfg: &MctsConfig,
    proposer: Proposer<'_>,
    mdp: &Mdp,
    seed: Seed,
) -> Result<DecodeResult> {
    let tree = mcts_search(params, value, inst, cfg, proposer, mdp, seed)?;
    let path = tree.most_visited_path();
    let mut actions = Vec::new();
    let mut lps = Vec::new();
    for &i in &path[1..] {
        actions.push(tree.nodes[i].action.clone().expect("non-root"));
        lps.extend(&tree.nodes[i].token_logprobs);
    }
    let last = &tree.nodes[*path.last().expect("root")];
    let mut truncated = last.truncated;
    let mut policy_evals = tree.policy_evals;
    let mut incomplete = false;
    if !last.is_terminal() {
        incomplete = true;
        let mut state = last.state.clone();
        while !state.is_terminal() && state.depth() < mdp.limits.max_actions {
            let Ok(g) = policy::greedy_action(params, &state, mdp) else {
                break;
            };
            policy_evals += g.policy_evals;
            truncated |= g.truncated;
            state = transition(&state, &g.action, &mdp.limits)?;
            lps.extend(&g.token_logprobs);
            actions.push(g.action);
        }
    }
    Ok(DecodeResult {
        trajectory: to_trajectory(&inst.question, &actions, &lps, truncated),
        policy_evals,
        prm_evals: tree.prm_evals,
        search_incomplete: incomplete,
    })
}

/// Dispatches one budget on one instance.
pub fn decode(
    budget: &DecodeBudget,
    params: &PolicyParams,
    prm: Option<&dyn StateValue>,
    inst: &TaskInstance,
    mdp: &Mdp,
    seed: Seed,
) -> Result<DecodeResult> {
    budget.validate()?;
    let need_prm = || prm.ok_or_else(|| Error::invalid(format!("{} needs a PRM", budget.label())));
    let policy_proposer = Proposer::Policy {
        width: budget.expansion_width,
        temperature: budget.temperature,
    };
    match budget.strategy {
        StrategyKind::Greedy => greedy_decode(params, inst, mdp),
        StrategyKind::BestOfN => {
            let scorer = match budget.scorer {
                ScorerKind::Prm => Scorer::Prm(need_prm()?),
                ScorerKind::Verifier => Scorer::Verifier(prm),
            };
            best_of_n(params, scorer, inst, budget.budget, budget.temperature, mdp, seed)
        }
        StrategyKind::Beam => beam_search(
            params,
            prm,
            inst,
            budget.budget,
            budget.lambda,
            policy_proposer,
            mdp,
            seed,
        ),
        StrategyKind::Mcts => {
            let cfg = MctsConfig {
                simulations: budget.budget,
                c_puct: budget.c_puct,
            };
            mcts_decode(params, need_prm()?, inst, &cfg, policy_proposer, mdp, seed)
        }
        StrategyKind::BestOfMcts => {
            let v = need_prm()?;
            let cfg = MctsConfig {
                simulations: budget.budget,
                c_puct: budget.c_puct,
            };
            let mut best: Option<(f64, DecodeResult)> = None;
            let (mut pe, mut ve) = (0, 0);
            for r in 0..budget.runs {
                let d = mcts_decode(params, v, inst, &cfg, policy_proposer, mdp, seed.child(r as u64))?;
                pe += d.policy_evals;
                ve += d.prm_evals + 1;
                let s = v.value(&d.trajectory.final_state(mdp)?);
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, d));
                }
            }
            let (_, mut d) = best.expect("runs ≥ 1");
            d.policy_evals = pe;
            d.prm_evals = ve;
            Ok(d)
        }
    }
}

/// Per-strategy accuracy and cost over an instance set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: String,
    pub budget: usize,
    pub accuracy: f64,
    pub policy_evals: f64,
    pub prm_evals: f64,
    pub seconds: f64,
}

/// The trajectory chosen for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub strategy: String,
    pub instance_id: String,
    pub trajectory: Trajectory,
    pub correct: bool,
    pub search_incomplete: bool,
}

/// Runs `budget` on every instance with `seed.child(k)` for instance `k`, so
/// strategies evaluated with the same seed see paired randomness.
pub fn evaluate_strategy(
    budget: &DecodeBudget,
    params: &PolicyParams,
    prm: Option<&dyn StateValue>,
    instances: &[TaskInstance],
    mdp: &Mdp,
    seed: Seed,
) -> Result<(StrategyReport, Vec<DecodeTrace>)> {
    if instances.is_empty() {
        return Err(Error::invalid("evaluate_strategy needs instances"));
    }
    budget.validate()?;
    let start = Instant::now();
    let results: Vec<DecodeResult> = instances
        .par_iter()
        .enumerate()
        .map(|(k, inst)| decode(budget, params, prm, inst, mdp, seed.child(k as u64)))
        .collect::<Result<_>>()?;
    let seconds = start.elapsed().as_secs_f64();
    let n = instances.len() as f64;
    let label = budget.label();
    let mut correct = 0usize;
    let mut traces = Vec::with_capacity(instances.len());
    let (mut pe, mut ve) = (0usize, 0usize);
    for (inst, r) in instances.iter().zip(results) {
        let ok = r
            .trajectory
            .answer
            .as_ref()
            .is_some_and(|a| verify_answer(inst, a, &mdp.vocab));
        correct += usize::from(ok);
        pe += r.policy_evals;
        ve += r.prm_evals;
        traces.push(DecodeTrace {
            strategy: label.clone(),
            instance_id: inst.id.clone(),
            trajectory: r.trajectory,
            correct: ok,
            search_incomplete: r.search_incomplete,
        });
    }
    Ok((
        StrategyReport {
            strategy: label,
            budget: budget.budget,
            accuracy: correct as f64 / n,
            policy_evals: pe as f64 / n,
            prm_evals: ve as f64 / n,
            seconds,
        },
        traces,
    ))
}
