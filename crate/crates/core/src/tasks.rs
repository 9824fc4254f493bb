//! Synthetic arithmetic chains with exact step and answer oracles.
//!
//! An addition chain `3+5+2` is solved left to right, one partial sum per
//! step: `3+5=8;` then `8+2=10;` then `#10$`. The modular variant carries the
//! modulus as a `%m` suffix and reduces every partial sum. Because the
//! canonical next step is unique, step labels and state values are exact.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{transition, Action, Mdp, State, TokenId, Trajectory, Vocab};
use crate::seed::Seed;

pub const MIN_OPERANDS: usize = 2;
pub const MAX_OPERANDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    AdditionChain,
    ModularChain,
}

impl TaskKind {
    fn short(self) -> &'static str {
        match self {
            TaskKind::AdditionChain => "add",
            TaskKind::ModularChain => "mod",
        }
    }
}

/// One question with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskInstance {
    pub id: String,
    pub kind: TaskKind,
    pub operands: Vec<u32>,
    pub modulus: Option<u32>,
    pub question: Vec<TokenId>,
    pub gold_answer: Vec<TokenId>,
    pub seed: u64,
}

impl TaskInstance {
    pub fn operand_count(&self) -> usize {
        self.operands.len()
    }

    /// Builds an instance from explicit operands.
    pub fn from_operands(
        kind: TaskKind,
        operands: &[u32],
        modulus: Option<u32>,
        seed: u64,
        vocab: &Vocab,
    ) -> Result<Self> {
        if !(MIN_OPERANDS..=MAX_OPERANDS).contains(&operands.len()) {
            return Err(Error::invalid(format!(
                "operand_count {} outside [{MIN_OPERANDS}, {MAX_OPERANDS}]",
                operands.len()
            )));
        }
        let modulus = match (kind, modulus) {
            (TaskKind::AdditionChain, _) => None,
            (TaskKind::ModularChain, Some(m)) if (2..=9).contains(&m) => Some(m),
            (TaskKind::ModularChain, m) => {
                return Err(Error::invalid(format!(
                    "modular chain needs a modulus in [2, 9], got {m:?}"
                )))
            }
        };
        let sym = Symbols::new(vocab)?;
        let mut question = Vec::new();
        for (i, &x) in operands.iter().enumerate() {
            if i > 0 {
                question.push(sym.plus);
            }
            question.extend(sym.number(x as u64));
        }
        if let Some(m) = modulus {
            question.push(sym.percent);
            question.extend(sym.number(m as u64));
        }
        let mut inst = Self {
            id: String::new(),
            kind,
            operands: operands.to_vec(),
            modulus,
            question,
            gold_answer: Vec::new(),
            seed,
        };
        let sums = inst.partial_sums();
        inst.gold_answer = sym.number(*sums.last().expect("≥2 operands"));
        inst.id = format!(
            "{}:{}:{}",
            kind.short(),
            vocab.render_compact(&inst.question),
            seed
        );
        Ok(inst)
    }

    /// Rebuilds an instance from its serialized question, recomputing the
    /// gold answer with the reference evaluator.
    pub fn from_question(
        kind: TaskKind,
        question: &[TokenId],
        seed: u64,
        vocab: &Vocab,
    ) -> Result<Self> {
        let bad = || Error::invalid(format!("question `{}` does not parse", vocab.render_compact(question)));
        let sym = Symbols::new(vocab)?;
        let (body, modulus) = match question.iter().position(|&t| t == sym.percent) {
            Some(p) => (&question[..p], Some(sym.parse_number(&question[p + 1..]).ok_or_else(bad)? as u32)),
            None => (question, None),
        };
        let operands = body
            .split(|&t| t == sym.plus)
            .map(|chunk| sym.parse_number(chunk).map(|v| v as u32))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(bad)?;
        let inst = Self::from_operands(kind, &operands, modulus, seed, vocab)?;
        if inst.question != question {
            return Err(bad());
        }
        Ok(inst)
    }

    /// Running values `S_0 = x_0`, `S_j = S_{j-1} + x_j` (reduced if modular).
    pub fn partial_sums(&self) -> Vec<u64> {
        let m = self.modulus.map(u64::from);
        let reduce = |v: u64| m.map_or(v, |m| v % m);
        let mut out = Vec::with_capacity(self.operands.len());
        let mut acc = reduce(self.operands[0] as u64);
        out.push(acc);
        for &x in &self.operands[1..] {
            acc = reduce(acc + x as u64);
            out.push(acc);
        }
        out
    }

    pub fn gold_value(&self) -> u64 {
        *self.partial_sums().last().expect("non-empty")
    }

    /// Number of reasoning steps the oracle takes before answering.
    pub fn oracle_step_count(&self) -> usize {
        self.operands.len() - 1
    }
}

/// Token ids the task grammar relies on.
#[derive(Debug, Clone)]
struct Symbols {
    digits: [TokenId; 10],
    plus: TokenId,
    equals: TokenId,
    percent: TokenId,
}

impl Symbols {
    fn new(vocab: &Vocab) -> Result<Self> {
        let need = |s: &str| {
            vocab
                .id(s)
                .ok_or_else(|| Error::Vocab(format!("task grammar needs token `{s}`")))
        };
        let mut digits = [TokenId(0); 10];
        for (d, slot) in digits.iter_mut().enumerate() {
            *slot = need(&d.to_string())?;
        }
        Ok(Self {
            digits,
            plus: need("+")?,
            equals: need("=")?,
            percent: need("%")?,
        })
    }

    fn number(&self, v: u64) -> Vec<TokenId> {
        v.to_string()
            .bytes()
            .map(|b| self.digits[(b - b'0') as usize])
            .collect()
    }

    fn digit_value(&self, t: TokenId) -> Option<u64> {
        self.digits.iter().position(|&d| d == t).map(|d| d as u64)
    }

    fn parse_number(&self, toks: &[TokenId]) -> Option<u64> {
        if toks.is_empty() || toks.len() > 18 {
            return None;
        }
        toks.iter()
            .try_fold(0u64, |acc, &t| Some(acc * 10 + self.digit_value(t)?))
    }
}

/// Generator settings: task family and largest operand value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub max_operand: u32,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            max_operand: 9,
        }
    }

    pub fn generate(&self, operand_count: usize, seed: Seed, vocab: &Vocab) -> Result<TaskInstance> {
        if !(MIN_OPERANDS..=MAX_OPERANDS).contains(&operand_count) {
            return Err(Error::invalid(format!(
                "operand_count {operand_count} outside [{MIN_OPERANDS}, {MAX_OPERANDS}]"
            )));
        }
        let mut rng = seed.rng();
        let operands: Vec<u32> = (0..operand_count)
            .map(|_| rng.gen_range(0..=self.max_operand))
            .collect();
        let modulus = match self.kind {
            TaskKind::AdditionChain => None,
            TaskKind::ModularChain => Some(rng.gen_range(2..=9)),
        };
        TaskInstance::from_operands(self.kind, &operands, modulus, seed.0, vocab)
    }

    /// Distinct questions (also distinct from `exclude`), operand counts drawn
    /// uniformly from `operand_counts`. Gives up after a bounded number of
    /// draws, so small task spaces yield fewer than `count` instances.
    pub fn generate_distinct(
        &self,
        operand_counts: std::ops::RangeInclusive<usize>,
        count: usize,
        seed: Seed,
        exclude: &HashSet<Vec<TokenId>>,
        vocab: &Vocab,
    ) -> Result<Vec<TaskInstance>> {
        let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
        let mut out = Vec::with_capacity(count);
        let mut pick = seed.derive("operand-count").rng();
        let max_draws = count * 50 + 100;
        for i in 0..max_draws as u64 {
            if out.len() == count {
                break;
            }
            let n = pick.gen_range(operand_counts.clone());
            let inst = self.generate(n, seed.child(i), vocab)?;
            if exclude.contains(&inst.question) || !seen.insert(inst.question.clone()) {
                continue;
            }
            out.push(inst);
        }
        Ok(out)
    }
}

/// Generates one instance with operands in `0..=9`.
pub fn generate_instance(
    kind: TaskKind,
    operand_count: usize,
    seed: Seed,
    vocab: &Vocab,
) -> Result<TaskInstance> {
    TaskSpec::new(kind).generate(operand_count, seed, vocab)
}

/// Every addition chain with `operand_count` operands in `0..=max_operand`.
pub fn enumerate_addition(operand_count: usize, max_operand: u32, vocab: &Vocab) -> Result<Vec<TaskInstance>> {
    let base = max_operand as usize + 1;
    let total = base.pow(operand_count as u32);
    (0..total)
        .map(|code| {
            let mut c = code;
            let ops: Vec<u32> = (0..operand_count)
                .map(|_| {
                    let d = c % base;
                    c /= base;
                    d as u32
                })
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect();
            TaskInstance::from_operands(TaskKind::AdditionChain, &ops, None, code as u64, vocab)
        })
        .collect()
}

/// Canonical `S_{j-1}+x_j=S_j;` for `j = index + 1`.
fn canonical_step_with(inst: &TaskInstance, index: usize, result: u64, sym: &Symbols, mdp: &Mdp) -> Action {
    let sums = inst.partial_sums();
    let mut t = sym.number(sums[index]);
    t.push(sym.plus);
    t.extend(sym.number(inst.operands[index + 1] as u64));
    t.push(sym.equals);
    t.extend(sym.number(result));
    Action::step(&t, mdp).expect("canonical step fits the limits")
}

/// The oracle's reasoning steps, in order.
pub fn oracle_steps(inst: &TaskInstance, mdp: &Mdp) -> Vec<Action> {
    let sym = Symbols::new(&mdp.vocab).expect("instance built with this vocabulary");
    let sums = inst.partial_sums();
    (0..inst.oracle_step_count())
        .map(|j| canonical_step_with(inst, j, sums[j + 1], &sym, mdp))
        .collect()
}

pub fn oracle_answer(inst: &TaskInstance, mdp: &Mdp) -> Action {
    Action::answer(&inst.gold_answer, mdp).expect("gold answer fits the limits")
}

/// The oracle trajectory `Q -> steps -> gold`, unscored.
pub fn oracle_trajectory(inst: &TaskInstance, mdp: &Mdp) -> Trajectory {
    let mut t = Trajectory::new(inst.question.clone());
    t.steps = oracle_steps(inst, mdp);
    t.answer = Some(oracle_answer(inst, mdp));
    t
}

/// The oracle's continuation from a state with `depth` completed steps.
pub fn oracle_action(inst: &TaskInstance, depth: usize, mdp: &Mdp) -> Action {
    if depth < inst.oracle_step_count() {
        oracle_steps(inst, mdp).swap_remove(depth)
    } else {
        oracle_answer(inst, mdp)
    }
}

/// Step-level ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepLabel {
    pub correct: bool,
    /// What the oracle would emit from the labeled state.
    pub expected: Vec<TokenId>,
}

fn check_prefix(inst: &TaskInstance, state: &State) -> Result<()> {
    if state.question() != inst.question.as_slice() {
        return Err(Error::InconsistentState {
            instance: inst.id.clone(),
            reason: "question tokens differ".into(),
        });
    }
    if state.is_terminal() {
        return Err(Error::InconsistentState {
            instance: inst.id.clone(),
            reason: "state is terminal".into(),
        });
    }
    Ok(())
}

/// Labels `step` taken from `state`: correct iff it is the oracle's next
/// partial computation. Steps past the last partial sum are never correct.
pub fn label_step(inst: &TaskInstance, state: &State, step: &Action, mdp: &Mdp) -> Result<StepLabel> {
    check_prefix(inst, state)?;
    if step.is_final() {
        return Err(Error::invalid("label_step expects a reasoning step"));
    }
    let expected = oracle_action(inst, state.depth(), mdp);
    Ok(StepLabel {
        correct: !expected.is_final() && expected.tokens() == step.tokens(),
        expected: expected.tokens().to_vec(),
    })
}

/// Whether the answer payload equals the gold answer after stripping leading
/// zeros. Malformed answers are simply wrong.
pub fn verify_answer(inst: &TaskInstance, answer: &Action, vocab: &Vocab) -> bool {
    let Ok(sym) = Symbols::new(vocab) else {
        return false;
    };
    let Some(content) = answer.answer_content(vocab) else {
        return false;
    };
    if content.is_empty() || content.iter().any(|&t| sym.digit_value(t).is_none()) {
        return false;
    }
    let zero = sym.digits[0];
    let first_nonzero = content.iter().position(|&t| t != zero);
    let canon = match first_nonzero {
        Some(i) => &content[i..],
        None => &content[content.len() - 1..],
    };
    canon == inst.gold_answer.as_slice()
}

/// Reward magnitudes. Final-correct must dominate everything else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub step_correct: f64,
    pub step_incorrect: f64,
    pub final_correct: f64,
    pub final_incorrect: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            step_correct: 0.2,
            step_incorrect: -0.2,
            final_correct: 1.0,
            final_incorrect: -1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.final_correct > self.step_correct
            && self.step_correct > 0.0
            && self.step_incorrect < 0.0
            && self.final_incorrect < 0.0
            && [
                self.step_correct,
                self.step_incorrect,
                self.final_correct,
                self.final_incorrect,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "rewards",
                "need final_correct > step_correct > 0 > step_incorrect and final_incorrect < 0",
            ))
        }
    }
}

pub fn reward(label_correct: bool, is_final: bool, cfg: &RewardConfig) -> f64 {
    match (label_correct, is_final) {
        (true, true) => cfg.final_correct,
        (false, true) => cfg.final_incorrect,
        (true, false) => cfg.step_correct,
        (false, false) => cfg.step_incorrect,
    }
}

/// Whether intermediate steps are rewarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardDensity {
    #[default]
    Dense,
    Sparse,
}

/// State reward `r(s)`: the reward of the action that produced `s`.
pub trait RewardModel: Sync {
    fn state_reward(&self, inst: &TaskInstance, state: &State, mdp: &Mdp) -> f64;
}

/// Oracle-backed rewards.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TaskReward {
    pub cfg: RewardConfig,
    pub density: RewardDensity,
}

impl TaskReward {
    pub fn dense(cfg: RewardConfig) -> Self {
        Self {
            cfg,
            density: RewardDensity::Dense,
        }
    }

    pub fn sparse(cfg: RewardConfig) -> Self {
        Self {
            cfg,
            density: RewardDensity::Sparse,
        }
    }

    /// Reward for taking `action` after `depth` completed actions.
    pub fn action_reward(&self, inst: &TaskInstance, depth: usize, action: &Action, mdp: &Mdp) -> f64 {
        if action.is_final() {
            reward(verify_answer(inst, action, &mdp.vocab), true, &self.cfg)
        } else if self.density == RewardDensity::Sparse {
            0.0
        } else {
            let expected = oracle_action(inst, depth, mdp);
            let ok = !expected.is_final() && expected.tokens() == action.tokens();
            reward(ok, false, &self.cfg)
        }
    }

    /// Fills `step_rewards` and `final_reward` from the oracle.
    pub fn score(&self, inst: &TaskInstance, traj: &mut Trajectory, mdp: &Mdp) {
        traj.step_rewards = traj
            .steps
            .iter()
            .enumerate()
            .map(|(d, a)| self.action_reward(inst, d, a, mdp))
            .collect();
        traj.final_reward = traj
            .answer
            .as_ref()
            .map(|a| self.action_reward(inst, traj.steps.len(), a, mdp));
    }
}

impl RewardModel for TaskReward {
    fn state_reward(&self, inst: &TaskInstance, state: &State, mdp: &Mdp) -> f64 {
        let Some(last) = state.last_action() else {
            return 0.0;
        };
        let action = Action::new(last.to_vec(), mdp).expect("state spans are valid actions");
        self.action_reward(inst, state.depth() - 1, &action, mdp)
    }
}

/// A finite action set per state, for brute-force oracles and exhaustive search.
pub trait ActionUniverse: Sync {
    fn actions(&self, inst: &TaskInstance, state: &State, mdp: &Mdp) -> Vec<Action>;
}

/// Canonical steps and answers with their numeric result shifted by small
/// offsets. Exactly one candidate step (offset 0) is correct. Steps stop once
/// the oracle would answer, which bounds tree depth by the operand count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationUniverse {
    pub step_offsets: Vec<i64>,
    pub answer_offsets: Vec<i64>,
}

impl Default for PerturbationUniverse {
    fn default() -> Self {
        Self {
            step_offsets: vec![-1, 0, 1],
            answer_offsets: vec![-1, 0, 1],
        }
    }
}

impl ActionUniverse for PerturbationUniverse {
    fn actions(&self, inst: &TaskInstance, state: &State, mdp: &Mdp) -> Vec<Action> {
        if state.is_terminal() {
            return Vec::new();
        }
        let sym = Symbols::new(&mdp.vocab).expect("instance built with this vocabulary");
        let sums = inst.partial_sums();
        let depth = state.depth();
        let mut out: Vec<Action> = Vec::new();
        let shifted = |v: u64, d: i64| u64::try_from(v as i64 + d).ok();
        if depth < inst.oracle_step_count() {
            for &d in &self.step_offsets {
                if let Some(r) = shifted(sums[depth + 1], d) {
                    let a = canonical_step_with(inst, depth, r, &sym, mdp);
                    if !out.contains(&a) {
                        out.push(a);
                    }
                }
            }
        }
        for &d in &self.answer_offsets {
            if let Some(v) = shifted(inst.gold_value(), d) {
                let a = Action::answer(&sym.number(v), mdp).expect("answer fits");
                if !out.contains(&a) {
                    out.push(a);
                }
            }
        }
        out.retain(|a| state.len() + a.len() <= mdp.limits.max_context_tokens);
        out
    }
}

/// Counts the states reachable through `universe`, stopping at `bound + 1`.
pub fn count_tree_nodes(
    inst: &TaskInstance,
    universe: &dyn ActionUniverse,
    mdp: &Mdp,
    bound: usize,
) -> usize {
    let mut stack = vec![State::initial(&inst.question, &mdp.vocab)];
    let mut n = 0;
    while let Some(s) = stack.pop() {
        n += 1;
        if n > bound {
            break;
        }
        for a in universe.actions(inst, &s, mdp) {
            if let Ok(next) = transition(&s, &a, &mdp.limits) {
                stack.push(next);
            }
        }
    }
    n
}
