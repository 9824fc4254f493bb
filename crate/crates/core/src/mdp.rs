//! Tokens, states, actions and trajectories of the reasoning MDP.
//!
//! A state is the question followed by the reasoning steps emitted so far.
//! Actions are whole steps (terminated by the step delimiter) or a final answer
//! (opened by the answer marker and closed by the end marker). The transition
//! law is plain concatenation, so a state is fully described by its tokens.
//!
//! Text layout of a complete trajectory, one character per token:
//!
//! ```text
//! 3+5+2;3+5=8;8+2=10;#10$
//! ^^^^^^ question plus its delimiter
//!       ^^^^^^ ^^^^^^^ reasoning steps
//!                     ^^^^ final answer
//! ```

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, ParseError, ParseErrorKind, Result};

/// Index of a symbol in a [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u16);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub const STEP_DELIMITER: &str = ";";
pub const ANSWER_MARKER: &str = "#";
pub const END_MARKER: &str = "$";

/// Ordered set of distinct symbols with the three structural markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    step_delimiter: TokenId,
    answer_marker: TokenId,
    end_marker: TokenId,
}

impl Vocab {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < 4 {
            return Err(Error::Vocab(format!(
                "needs at least 4 tokens, got {}",
                tokens.len()
            )));
        }
        if tokens.len() > u16::MAX as usize {
            return Err(Error::Vocab("too many tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("token {i} is empty or has whitespace")));
            }
            if index.insert(t.clone(), TokenId(i as u16)).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        let find = |sym: &str| {
            index
                .get(sym)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("missing structural token `{sym}`")))
        };
        Ok(Self {
            step_delimiter: find(STEP_DELIMITER)?,
            answer_marker: find(ANSWER_MARKER)?,
            end_marker: find(END_MARKER)?,
            tokens,
            index,
        })
    }

    /// Digits, `+`, `=`, `%` and the three markers.
    pub fn arithmetic() -> Self {
        let mut toks: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        toks.extend(["+", "=", "%", STEP_DELIMITER, ANSWER_MARKER, END_MARKER].map(String::from));
        Self::new(toks).expect("arithmetic vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.tokens[id.index()]
    }

    pub fn step_delimiter(&self) -> TokenId {
        self.step_delimiter
    }

    pub fn answer_marker(&self) -> TokenId {
        self.answer_marker
    }

    pub fn end_marker(&self) -> TokenId {
        self.end_marker
    }

    pub fn is_terminator(&self, id: TokenId) -> bool {
        id == self.step_delimiter || id == self.end_marker
    }

    /// Parses space-separated symbols.
    pub fn parse(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|s| {
                self.id(s)
                    .ok_or_else(|| Error::Vocab(format!("unknown token `{s}`")))
            })
            .collect()
    }

    /// Parses a string where every character is one symbol (`"3+5;"`).
    pub fn parse_compact(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut buf = [0u8; 4];
        text.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| {
                let s = c.encode_utf8(&mut buf);
                self.id(s)
                    .ok_or_else(|| Error::Vocab(format!("unknown token `{s}`")))
            })
            .collect()
    }

    /// Space-separated rendering; the inverse of [`Vocab::parse`].
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&t| self.symbol(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Concatenated rendering, readable for single-character vocabularies.
    pub fn render_compact(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&t| self.symbol(t)).collect()
    }

    /// Stable 64-bit fingerprint of the ordered symbol list.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }
}

/// Size bounds on actions and contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdpLimits {
    pub max_step_tokens: usize,
    pub max_context_tokens: usize,
    /// Rollouts stop (truncated) after this many actions without an answer.
    pub max_actions: usize,
}

impl Default for MdpLimits {
    fn default() -> Self {
        Self {
            max_step_tokens: 16,
            max_context_tokens: 256,
            max_actions: 10,
        }
    }
}

/// Vocabulary plus limits: everything needed to apply the transition law.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mdp {
    pub vocab: Vocab,
    pub limits: MdpLimits,
}

impl Mdp {
    pub fn new(vocab: Vocab, limits: MdpLimits) -> Self {
        Self { vocab, limits }
    }

    pub fn arithmetic() -> Self {
        Self::new(Vocab::arithmetic(), MdpLimits::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    ReasoningStep,
    FinalAnswer,
}

/// One MDP action: a reasoning step ending in `;` or a final answer ending in `$`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Action {
    kind: ActionKind,
    tokens: Vec<TokenId>,
}

impl Action {
    /// Validates a raw token run and infers its kind from the terminator.
    pub fn new(tokens: Vec<TokenId>, mdp: &Mdp) -> Result<Self> {
        let vocab = &mdp.vocab;
        let Some(&last) = tokens.last() else {
            return Err(Error::MalformedAction("empty token sequence".into()));
        };
        let kind = if last == vocab.step_delimiter() {
            ActionKind::ReasoningStep
        } else if last == vocab.end_marker() {
            ActionKind::FinalAnswer
        } else {
            return Err(Error::MalformedAction(format!(
                "last token `{}` is not a terminator",
                vocab.symbol(last)
            )));
        };
        if let Some(pos) = tokens[..tokens.len() - 1]
            .iter()
            .position(|&t| vocab.is_terminator(t))
        {
            return Err(Error::MalformedAction(format!(
                "terminator before the end at position {pos}"
            )));
        }
        if tokens.len() > mdp.limits.max_step_tokens {
            return Err(Error::MalformedAction(format!(
                "{} tokens exceeds max_step_tokens {}",
                tokens.len(),
                mdp.limits.max_step_tokens
            )));
        }
        Ok(Self { kind, tokens })
    }

    /// Builds `content ;`.
    pub fn step(content: &[TokenId], mdp: &Mdp) -> Result<Self> {
        let mut t = content.to_vec();
        t.push(mdp.vocab.step_delimiter());
        Self::new(t, mdp)
    }

    /// Builds `# content $`.
    pub fn answer(content: &[TokenId], mdp: &Mdp) -> Result<Self> {
        let mut t = Vec::with_capacity(content.len() + 2);
        t.push(mdp.vocab.answer_marker());
        t.extend_from_slice(content);
        t.push(mdp.vocab.end_marker());
        Self::new(t, mdp)
    }

    pub fn kind(&self) -> ActionKind {
        self.kind
    }

    pub fn is_final(&self) -> bool {
        self.kind == ActionKind::FinalAnswer
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Answer payload between `#` and `$`, or `None` when the answer is not
    /// opened by the marker.
    pub fn answer_content(&self, vocab: &Vocab) -> Option<&[TokenId]> {
        if self.kind != ActionKind::FinalAnswer {
            return None;
        }
        let (first, rest) = self.tokens.split_first()?;
        (*first == vocab.answer_marker()).then(|| &rest[..rest.len() - 1])
    }

    /// Step payload without the trailing delimiter.
    pub fn step_content(&self) -> &[TokenId] {
        &self.tokens[..self.tokens.len() - 1]
    }
}

/// MDP state: question, delimiter, then completed actions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    tokens: Vec<TokenId>,
    prefix_len: usize,
    step_boundaries: Vec<usize>,
    terminal: bool,
}

impl State {
    /// `s_0`: the question followed by the step delimiter.
    pub fn initial(question: &[TokenId], vocab: &Vocab) -> Self {
        let mut tokens = question.to_vec();
        tokens.push(vocab.step_delimiter());
        Self {
            prefix_len: tokens.len(),
            tokens,
            step_boundaries: Vec::new(),
            terminal: false,
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn question(&self) -> &[TokenId] {
        &self.tokens[..self.prefix_len - 1]
    }

    /// Length of the question plus its delimiter.
    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn step_boundaries(&self) -> &[usize] {
        &self.step_boundaries
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Number of actions taken since `s_0`.
    pub fn depth(&self) -> usize {
        self.step_boundaries.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token runs of the completed actions, in order.
    pub fn action_spans(&self) -> impl Iterator<Item = &[TokenId]> + '_ {
        let mut start = self.prefix_len;
        self.step_boundaries.iter().map(move |&end| {
            let span = &self.tokens[start..=end];
            start = end + 1;
            span
        })
    }

    /// Tokens of the most recent action, if any.
    pub fn last_action(&self) -> Option<&[TokenId]> {
        let end = *self.step_boundaries.last()?;
        let start = match self.step_boundaries.len() {
            1 => self.prefix_len,
            n => self.step_boundaries[n - 2] + 1,
        };
        Some(&self.tokens[start..=end])
    }
}

/// `s_{t+1} = s_t + a_t`. Never mutates `state`.
pub fn transition(state: &State, action: &Action, limits: &MdpLimits) -> Result<State> {
    if state.terminal {
        return Err(Error::TerminalState);
    }
    let len = state.tokens.len() + action.tokens.len();
    if len > limits.max_context_tokens {
        return Err(Error::ContextOverflow {
            len,
            limit: limits.max_context_tokens,
        });
    }
    let mut tokens = Vec::with_capacity(len);
    tokens.extend_from_slice(&state.tokens);
    tokens.extend_from_slice(&action.tokens);
    let mut step_boundaries = state.step_boundaries.clone();
    step_boundaries.push(len - 1);
    Ok(State {
        tokens,
        prefix_len: state.prefix_len,
        step_boundaries,
        terminal: action.is_final(),
    })
}

/// A rollout `(Q, R_1..R_n, A)` with its rewards and token log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub question: Vec<TokenId>,
    pub steps: Vec<Action>,
    pub answer: Option<Action>,
    /// One entry per realized step once scored; empty while unscored.
    pub step_rewards: Vec<f64>,
    pub final_reward: Option<f64>,
    /// One entry per generated token (natural log).
    pub token_logprobs: Vec<f64>,
    /// Set when a step was force-terminated or the rollout hit a limit.
    pub truncated: bool,
}

impl Trajectory {
    pub fn new(question: Vec<TokenId>) -> Self {
        Self {
            question,
            steps: Vec::new(),
            answer: None,
            step_rewards: Vec::new(),
            final_reward: None,
            token_logprobs: Vec::new(),
            truncated: false,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.answer.is_some()
    }

    pub fn actions(&self) -> impl Iterator<Item = &Action> + '_ {
        self.steps.iter().chain(self.answer.iter())
    }

    pub fn num_actions(&self) -> usize {
        self.steps.len() + usize::from(self.answer.is_some())
    }

    pub fn initial_state(&self, vocab: &Vocab) -> State {
        State::initial(&self.question, vocab)
    }

    /// `s_0 .. s_T`, one more entry than there are actions.
    pub fn states(&self, mdp: &Mdp) -> Result<Vec<State>> {
        let mut out = Vec::with_capacity(self.num_actions() + 1);
        out.push(self.initial_state(&mdp.vocab));
        for a in self.actions() {
            let next = transition(out.last().expect("non-empty"), a, &mdp.limits)?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn final_state(&self, mdp: &Mdp) -> Result<State> {
        let mut s = self.initial_state(&mdp.vocab);
        for a in self.actions() {
            s = transition(&s, a, &mdp.limits)?;
        }
        Ok(s)
    }

    /// Question, delimiter and every action token, concatenated.
    pub fn tokens(&self, vocab: &Vocab) -> Vec<TokenId> {
        let mut t = self.question.clone();
        t.push(vocab.step_delimiter());
        for a in self.actions() {
            t.extend_from_slice(a.tokens());
        }
        t
    }

    pub fn generated_len(&self) -> usize {
        self.actions().map(Action::len).sum()
    }

    /// Sum of token log-probabilities per action, aligned with `actions()`.
    pub fn action_logprobs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_actions());
        let mut off = 0;
        for a in self.actions() {
            let end = (off + a.len()).min(self.token_logprobs.len());
            out.push(self.token_logprobs[off.min(end)..end].iter().sum());
            off += a.len();
        }
        out
    }

    /// Per-action rewards: step rewards followed by the final reward.
    pub fn rewards(&self) -> Vec<f64> {
        let mut r = self.step_rewards.clone();
        r.extend(self.final_reward);
        r
    }
}

/// Source of next-token conditionals `P(x_t | x_<t)`.
pub trait TokenLogProb {
    fn token_logprob(&self, context: &[TokenId], next: TokenId) -> f64;
}

/// Result of [`joint_logprob`]; `zero_probability_at` names the first
/// generated token whose conditional was zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLogProb {
    pub nats: f64,
    pub zero_probability_at: Option<usize>,
}

impl JointLogProb {
    pub fn is_finite(&self) -> bool {
        self.zero_probability_at.is_none()
    }
}

/// `Σ_t log P(x_t | x_<t)` over generated tokens. The question conditions
/// but is never scored.
pub fn joint_logprob(model: &impl TokenLogProb, traj: &Trajectory, vocab: &Vocab) -> JointLogProb {
    let mut context = traj.question.clone();
    context.push(vocab.step_delimiter());
    let mut nats = 0.0;
    let mut zero_at = None;
    for (i, &tok) in traj.actions().flat_map(|a| a.tokens()).enumerate() {
        let lp = model.token_logprob(&context, tok);
        if lp == f64::NEG_INFINITY && zero_at.is_none() {
            zero_at = Some(i);
        }
        nats += lp;
        context.push(tok);
    }
    JointLogProb {
        nats: if zero_at.is_some() {
            f64::NEG_INFINITY
        } else {
            nats
        },
        zero_probability_at: zero_at,
    }
}

/// Output of [`segment`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmented {
    pub question: Vec<TokenId>,
    pub steps: Vec<Action>,
    pub answer: Option<Action>,
}

/// Splits `Q ; R_1 ; .. R_n ; # A $` back into its parts. A sequence ending
/// on a step delimiter yields a partial trajectory with no answer.
pub fn segment(tokens: &[TokenId], mdp: &Mdp) -> std::result::Result<Segmented, ParseError> {
    let vocab = &mdp.vocab;
    let err = |index, kind| ParseError { index, kind };
    let is_marker = |t: TokenId| t == vocab.answer_marker() || t == vocab.end_marker();

    let q_end = match tokens.iter().position(|&t| vocab.is_terminator(t)) {
        Some(i) if tokens[i] == vocab.step_delimiter() => i,
        Some(i) => return Err(err(i, ParseErrorKind::MisplacedMarker)),
        None => return Err(err(tokens.len(), ParseErrorKind::MissingTerminator)),
    };
    if q_end == 0 {
        return Err(err(0, ParseErrorKind::EmptyQuestion));
    }
    if let Some(i) = tokens[..q_end].iter().position(|&t| is_marker(t)) {
        return Err(err(i, ParseErrorKind::MisplacedMarker));
    }

    let mut out = Segmented {
        question: tokens[..q_end].to_vec(),
        steps: Vec::new(),
        answer: None,
    };
    let mut start = q_end + 1;
    while start < tokens.len() {
        if out.answer.is_some() {
            return Err(err(start, ParseErrorKind::TokensAfterEnd));
        }
        let Some(rel) = tokens[start..].iter().position(|&t| vocab.is_terminator(t)) else {
            return Err(err(tokens.len(), ParseErrorKind::MissingTerminator));
        };
        let end = start + rel;
        let chunk = &tokens[start..=end];
        if tokens[end] == vocab.step_delimiter() {
            if chunk.len() == 1 {
                return Err(err(end, ParseErrorKind::EmptyStep));
            }
            if let Some(i) = chunk.iter().position(|&t| is_marker(t)) {
                return Err(err(start + i, ParseErrorKind::MisplacedMarker));
            }
            out.steps
                .push(Action::new(chunk.to_vec(), mdp).map_err(|_| err(end, ParseErrorKind::EmptyStep))?);
        } else {
            if chunk[0] != vocab.answer_marker() {
                return Err(err(start, ParseErrorKind::MisplacedMarker));
            }
            if chunk.len() == 2 {
                return Err(err(end, ParseErrorKind::EmptyAnswer));
            }
            if let Some(i) = chunk[1..].iter().position(|&t| t == vocab.answer_marker()) {
                return Err(err(start + 1 + i, ParseErrorKind::MisplacedMarker));
            }
            out.answer = Some(
                Action::new(chunk.to_vec(), mdp)
                    .map_err(|_| err(end, ParseErrorKind::MissingTerminator))?,
            );
        }
        start = end + 1;
    }
    Ok(out)
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}
