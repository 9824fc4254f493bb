//! Chain-of-thought reasoning as a Markov decision process.
//!
//! States are token sequences (question plus completed steps), actions are
//! whole reasoning steps or a final answer, and transitions concatenate. On
//! top of that sit a windowed softmax policy, self-taught rationale
//! collection, a process reward model trained as a classifier or by TD
//! learning, group-relative policy optimization, and verifier-guided decoding
//! (best-of-N, beam, MCTS). Synthetic arithmetic tasks supply exact oracles.

pub mod checkpoint;
pub mod decode;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod mdp;
pub mod nn;
pub mod policy;
pub mod prm;
pub mod seed;
pub mod star;
pub mod tasks;

pub use error::{Error, ParseError, ParseErrorKind, Result};
pub use mdp::{
    joint_logprob, segment, transition, Action, ActionKind, JointLogProb, Mdp, MdpLimits, State,
    TokenId, TokenLogProb, Trajectory, Vocab,
};
pub use policy::PolicyParams;
pub use prm::{ValueMode, ValueParams};
pub use seed::Seed;
pub use tasks::{TaskInstance, TaskKind};
