//! JSON-lines datasets. The first line is a header naming the record kind
//! and schema version; every following line is one record. Token sequences
//! are stored as space-separated token strings.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decode::DecodeTrace;
use crate::error::{Error, Result};
use crate::mdp::{Action, Mdp, State, TokenId, Trajectory, Vocab};
use crate::prm::LabeledStepRecord;
use crate::star::{StarMode, StarRecord};
use crate::tasks::{TaskInstance, TaskKind};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
}

/// A type with a JSON-lines wire form.
pub trait Record: Sized {
    const KIND: &'static str;
    type Wire: Serialize + DeserializeOwned;
    fn to_wire(&self, vocab: &Vocab) -> Self::Wire;
    fn from_wire(wire: Self::Wire, mdp: &Mdp) -> std::result::Result<Self, String>;
}

fn toks(ids: &[TokenId], vocab: &Vocab) -> String {
    vocab.render(ids)
}

fn parse_toks(s: &str, vocab: &Vocab) -> std::result::Result<Vec<TokenId>, String> {
    vocab.parse(s).map_err(|e| e.to_string())
}

fn parse_action(s: &str, mdp: &Mdp) -> std::result::Result<Action, String> {
    Action::new(parse_toks(s, &mdp.vocab)?, mdp).map_err(|e| e.to_string())
}

/// Splits on terminators rather than using `segment`, which rejects the
/// malformed steps a sampler can produce.
fn rebuild_state(tokens: &[TokenId], mdp: &Mdp) -> std::result::Result<State, String> {
    let v = &mdp.vocab;
    let q_end = tokens
        .iter()
        .position(|&t| v.is_terminator(t))
        .filter(|&i| tokens[i] == v.step_delimiter() && i > 0)
        .ok_or("state does not start with `question ;`")?;
    let mut s = State::initial(&tokens[..q_end], &mdp.vocab);
    let mut start = q_end + 1;
    while start < tokens.len() {
        let end = start
            + tokens[start..]
                .iter()
                .position(|&t| v.is_terminator(t))
                .ok_or("trailing tokens without a terminator")?;
        let a = Action::new(tokens[start..=end].to_vec(), mdp).map_err(|e| e.to_string())?;
        s = crate::mdp::transition(&s, &a, &mdp.limits).map_err(|e| e.to_string())?;
        start = end + 1;
    }
    Ok(s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceWire {
    pub id: String,
    pub kind: TaskKind,
    pub question: String,
    pub gold_answer: String,
    pub seed: u64,
}

impl Record for TaskInstance {
    const KIND: &'static str = "instance";
    type Wire = InstanceWire;

    fn to_wire(&self, vocab: &Vocab) -> InstanceWire {
        InstanceWire {
            id: self.id.clone(),
            kind: self.kind,
            question: toks(&self.question, vocab),
            gold_answer: toks(&self.gold_answer, vocab),
            seed: self.seed,
        }
    }

    fn from_wire(w: InstanceWire, mdp: &Mdp) -> std::result::Result<Self, String> {
        let q = parse_toks(&w.question, &mdp.vocab)?;
        let inst = TaskInstance::from_question(w.kind, &q, w.seed, &mdp.vocab).map_err(|e| e.to_string())?;
        if toks(&inst.gold_answer, &mdp.vocab) != w.gold_answer {
            return Err(format!(
                "gold answer `{}` disagrees with the evaluator (`{}`)",
                w.gold_answer,
                toks(&inst.gold_answer, &mdp.vocab)
            ));
        }
        if inst.id != w.id {
            return Err(format!("id `{}` does not match question and seed", w.id));
        }
        Ok(inst)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryWire {
    pub question: String,
    pub steps: Vec<String>,
    pub answer: Option<String>,
    pub step_rewards: Vec<f64>,
    pub final_reward: Option<f64>,
    pub token_logprobs: Vec<f64>,
    pub truncated: bool,
}

impl Record for Trajectory {
    const KIND: &'static str = "trajectory";
    type Wire = TrajectoryWire;

    fn to_wire(&self, vocab: &Vocab) -> TrajectoryWire {
        TrajectoryWire {
            question: toks(&self.question, vocab),
            steps: self.steps.iter().map(|a| toks(a.tokens(), vocab)).collect(),
            answer: self.answer.as_ref().map(|a| toks(a.tokens(), vocab)),
            step_rewards: self.step_rewards.clone(),
            final_reward: self.final_reward,
            token_logprobs: self.token_logprobs.clone(),
            truncated: self.truncated,
        }
    }

    fn from_wire(w: TrajectoryWire, mdp: &Mdp) -> std::result::Result<Self, String> {
        let mut t = Trajectory::new(parse_toks(&w.question, &mdp.vocab)?);
        for s in &w.steps {
            let a = parse_action(s, mdp)?;
            if a.is_final() {
                return Err(format!("step `{s}` is a final answer"));
            }
            t.steps.push(a);
        }
        if let Some(s) = &w.answer {
            let a = parse_action(s, mdp)?;
            if !a.is_final() {
                return Err(format!("answer `{s}` is not a final answer"));
            }
            t.answer = Some(a);
        }
        t.step_rewards = w.step_rewards;
        t.final_reward = w.final_reward;
        t.token_logprobs = w.token_logprobs;
        t.truncated = w.truncated;
        Ok(t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StarRecordWire {
    pub instance_id: String,
    pub iteration: usize,
    pub mode: StarMode,
    pub step_labels: Vec<bool>,
    pub trajectory: TrajectoryWire,
}

impl Record for StarRecord {
    const KIND: &'static str = "star-record";
    type Wire = StarRecordWire;

    fn to_wire(&self, vocab: &Vocab) -> StarRecordWire {
        StarRecordWire {
            instance_id: self.instance_id.clone(),
            iteration: self.iteration,
            mode: self.mode,
            step_labels: self.step_labels.clone(),
            trajectory: self.trajectory.to_wire(vocab),
        }
    }

    fn from_wire(w: StarRecordWire, mdp: &Mdp) -> std::result::Result<Self, String> {
        let trajectory = Trajectory::from_wire(w.trajectory, mdp)?;
        if w.step_labels.len() != trajectory.steps.len() {
            return Err(format!(
                "{} step labels for {} steps",
                w.step_labels.len(),
                trajectory.steps.len()
            ));
        }
        Ok(StarRecord {
            instance_id: w.instance_id,
            trajectory,
            iteration: w.iteration,
            mode: w.mode,
            step_labels: w.step_labels,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledStepWire {
    pub instance_id: String,
    pub state: String,
    pub label: bool,
    pub is_final: bool,
}

impl Record for LabeledStepRecord {
    const KIND: &'static str = "labeled-step";
    type Wire = LabeledStepWire;

    fn to_wire(&self, vocab: &Vocab) -> LabeledStepWire {
        LabeledStepWire {
            instance_id: self.instance_id.clone(),
            state: toks(self.state.tokens(), vocab),
            label: self.label,
            is_final: self.is_final,
        }
    }

    fn from_wire(w: LabeledStepWire, mdp: &Mdp) -> std::result::Result<Self, String> {
        let state = rebuild_state(&parse_toks(&w.state, &mdp.vocab)?, mdp)?;
        if state.is_terminal() != w.is_final {
            return Err("is_final disagrees with the state".into());
        }
        Ok(LabeledStepRecord {
            state,
            label: w.label,
            is_final: w.is_final,
            instance_id: w.instance_id,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeTraceWire {
    pub strategy: String,
    pub instance_id: String,
    pub correct: bool,
    pub search_incomplete: bool,
    pub trajectory: TrajectoryWire,
}

impl Record for DecodeTrace {
    const KIND: &'static str = "decode-trace";
    type Wire = DecodeTraceWire;

    fn to_wire(&self, vocab: &Vocab) -> DecodeTraceWire {
        DecodeTraceWire {
            strategy: self.strategy.clone(),
            instance_id: self.instance_id.clone(),
            correct: self.correct,
            search_incomplete: self.search_incomplete,
            trajectory: self.trajectory.to_wire(vocab),
        }
    }

    fn from_wire(w: DecodeTraceWire, mdp: &Mdp) -> std::result::Result<Self, String> {
        Ok(DecodeTrace {
            strategy: w.strategy,
            instance_id: w.instance_id,
            correct: w.correct,
            search_incomplete: w.search_incomplete,
            trajectory: Trajectory::from_wire(w.trajectory, mdp)?,
        })
    }
}

fn schema_name<R: Record>() -> String {
    format!("cot-mdp/{}", R::KIND)
}

/// Writes header plus one line per record.
pub fn write_records<R: Record>(records: &[R], mut out: impl Write, vocab: &Vocab) -> std::io::Result<()> {
    let header = Header {
        schema: schema_name::<R>(),
        version: SCHEMA_VERSION,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, &r.to_wire(vocab))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Inverse of [`write_records`]. `path` only labels errors.
pub fn read_records<R: Record>(input: impl BufRead, path: &Path, mdp: &Mdp) -> Result<Vec<R>> {
    let err = |line: usize, reason: String| Error::Records {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = input.lines();
    let first = match lines.next() {
        Some(l) => l?,
        None => return Err(err(1, "missing header".into())),
    };
    let header: Header = serde_json::from_str(&first).map_err(|e| err(1, format!("bad header: {e}")))?;
    if header.schema != schema_name::<R>() {
        return Err(err(
            1,
            format!("schema `{}`, expected `{}`", header.schema, schema_name::<R>()),
        ));
    }
    if header.version != SCHEMA_VERSION {
        return Err(err(
            1,
            format!("schema version {} unsupported (this build reads {SCHEMA_VERSION})", header.version),
        ));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line?;
        let wire: R::Wire = serde_json::from_str(&line).map_err(|e| err(n, e.to_string()))?;
        out.push(R::from_wire(wire, mdp).map_err(|e| err(n, e))?);
    }
    Ok(out)
}

/// Atomic write via a sibling temporary file.
pub fn persist_records<R: Record>(records: &[R], path: &Path, mdp: &Mdp) -> Result<()> {
    let mut buf = Vec::new();
    write_records(records, &mut buf, &mdp.vocab)?;
    write_atomic(path, &buf)
}

pub fn load_records<R: Record>(path: &Path, mdp: &Mdp) -> Result<Vec<R>> {
    let f = fs::File::open(path)?;
    read_records(BufReader::new(f), path, mdp)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::oracle_trajectory;

    #[test]
    fn empty_dataset_is_header_only() {
        let m = Mdp::arithmetic();
        let mut buf = Vec::new();
        write_records::<Trajectory>(&[], &mut buf, &m.vocab).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
        let back: Vec<Trajectory> = read_records(&buf[..], Path::new("t"), &m).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn truncated_last_line_names_the_line() {
        let m = Mdp::arithmetic();
        let i = TaskInstance::from_operands(TaskKind::AdditionChain, &[4, 4], None, 3, &m.vocab).unwrap();
        let t = oracle_trajectory(&i, &m);
        let mut buf = Vec::new();
        write_records(&[t.clone(), t], &mut buf, &m.vocab).unwrap();
        buf.truncate(buf.len() - 10);
        let e = read_records::<Trajectory>(&buf[..], Path::new("d.jsonl"), &m).unwrap_err();
        assert!(matches!(e, Error::Records { line: 3, .. }), "{e}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let m = Mdp::arithmetic();
        let text = "{\"schema\":\"cot-mdp/trajectory\",\"version\":99}\n";
        let e = read_records::<Trajectory>(text.as_bytes(), Path::new("v"), &m).unwrap_err();
        assert!(matches!(e, Error::Records { line: 1, .. }));
    }

    #[test]
    fn instances_round_trip() {
        let m = Mdp::arithmetic();
        let i = TaskInstance::from_operands(TaskKind::ModularChain, &[7, 8, 9], Some(5), 11, &m.vocab).unwrap();
        let mut buf = Vec::new();
        write_records(std::slice::from_ref(&i), &mut buf, &m.vocab).unwrap();
        let back: Vec<TaskInstance> = read_records(&buf[..], Path::new("i"), &m).unwrap();
        assert_eq!(back, vec![i]);
    }
}
