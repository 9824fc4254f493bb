//! Experiment configuration: strict TOML, every section optional except the
//! task kind and the master seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::{DecodeBudget, ScorerKind, StrategyKind};
use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::mdp::{Mdp, MdpLimits, Vocab};
use crate::policy::{SupervisedConfig, DEFAULT_HIDDEN, DEFAULT_INIT_SCALE, DEFAULT_WINDOW};
use crate::prm::{ProposalConfig, PrmTrainConfig, ValueMode};
use crate::star::StarConfig;
use crate::tasks::{RewardConfig, RewardDensity, TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage and worker stream derives from it.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub task: TaskConfig,
    #[serde(default)]
    pub mdp: MdpConfig,
    #[serde(default)]
    pub stages: StagesConfig,
    #[serde(default)]
    pub policy: ArchConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub star: StarConfig,
    #[serde(default)]
    pub rewards: RewardConfig,
    #[serde(default)]
    pub prm: PrmConfig,
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub grpo_reward: GrpoRewardConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    #[serde(default = "TaskConfig::default_max_operand")]
    pub max_operand: u32,
    #[serde(default = "TaskConfig::default_operands")]
    pub train_min_operands: usize,
    #[serde(default = "TaskConfig::default_operands")]
    pub train_max_operands: usize,
    #[serde(default = "TaskConfig::default_train_instances")]
    pub train_instances: usize,
    #[serde(default = "TaskConfig::default_eval_operands")]
    pub eval_min_operands: usize,
    #[serde(default = "TaskConfig::default_eval_operands")]
    pub eval_max_operands: usize,
    #[serde(default = "TaskConfig::default_eval_instances")]
    pub eval_instances: usize,
}

impl TaskConfig {
    fn default_max_operand() -> u32 {
        9
    }
    fn default_operands() -> usize {
        2
    }
    fn default_train_instances() -> usize {
        100
    }
    fn default_eval_operands() -> usize {
        3
    }
    fn default_eval_instances() -> usize {
        50
    }

    pub fn spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.kind,
            max_operand: self.max_operand,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabSpec {
    #[default]
    Arithmetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdpConfig {
    pub vocab: VocabSpec,
    pub max_step_tokens: usize,
    pub max_context_tokens: usize,
    pub max_actions: usize,
}

impl Default for MdpConfig {
    fn default() -> Self {
        let l = MdpLimits::default();
        Self {
            vocab: VocabSpec::Arithmetic,
            max_step_tokens: l.max_step_tokens,
            max_context_tokens: l.max_context_tokens,
            max_actions: l.max_actions,
        }
    }
}

impl MdpConfig {
    pub fn build(&self) -> Mdp {
        let vocab = match self.vocab {
            VocabSpec::Arithmetic => Vocab::arithmetic(),
        };
        Mdp::new(
            vocab,
            MdpLimits {
                max_step_tokens: self.max_step_tokens,
                max_context_tokens: self.max_context_tokens,
                max_actions: self.max_actions,
            },
        )
    }
}

/// Which stages run after task generation and pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    pub star: bool,
    pub train_prm: bool,
    pub grpo: bool,
    pub decode_eval: bool,
}

impl Default for StagesConfig {
    fn default() -> Self {
        Self {
            star: true,
            train_prm: true,
            grpo: true,
            decode_eval: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub window: usize,
    pub hidden: usize,
    pub init_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            hidden: DEFAULT_HIDDEN,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }
}

impl ArchConfig {
    fn validate(&self, key: &str) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config(format!("{key}.window"), "must be ≥ 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config(format!("{key}.hidden"), "must be ≥ 1"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config(format!("{key}.init_scale"), "must be ≥ 0"));
        }
        Ok(())
    }
}

/// Supervised warm start on oracle traces of the first `examples` training
/// questions. Zero skips training and keeps the random initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub examples: usize,
    pub train: SupervisedConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            examples: 10,
            train: SupervisedConfig {
                learning_rate: 0.1,
                epochs: 100,
                ..SupervisedConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrmConfig {
    pub mode: ValueMode,
    pub window: usize,
    pub hidden: usize,
    pub init_scale: f64,
    pub gamma: f64,
    /// Reward density for TD targets.
    pub density: RewardDensity,
    /// Policy rollouts per training question when collecting TD states.
    pub rollouts_per_instance: usize,
    pub proposals: usize,
    pub proposal_temperature: f64,
    pub include_oracle: bool,
    pub train: PrmTrainConfig,
}

impl Default for PrmConfig {
    fn default() -> Self {
        Self {
            mode: ValueMode::Classifier,
            window: DEFAULT_WINDOW,
            hidden: DEFAULT_HIDDEN,
            init_scale: DEFAULT_INIT_SCALE,
            gamma: 1.0,
            density: RewardDensity::Dense,
            rollouts_per_instance: 2,
            proposals: 8,
            proposal_temperature: 1.0,
            include_oracle: true,
            train: PrmTrainConfig::default(),
        }
    }
}

impl PrmConfig {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            window: self.window,
            hidden: self.hidden,
            init_scale: self.init_scale,
        }
    }

    pub fn proposal(&self) -> ProposalConfig {
        ProposalConfig {
            m: self.proposals,
            temperature: self.proposal_temperature,
            include_oracle: self.include_oracle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    /// Exact task oracle.
    #[default]
    Oracle,
    /// Expected reward under the trained classifier PRM.
    Prm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoRewardConfig {
    pub source: RewardSource,
    pub density: RewardDensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Write per-instance traces next to the report.
    pub traces: bool,
    pub budgets: Vec<DecodeBudget>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            traces: true,
            budgets: vec![
                DecodeBudget::default(),
                DecodeBudget {
                    strategy: StrategyKind::BestOfN,
                    budget: 8,
                    ..DecodeBudget::default()
                },
                DecodeBudget {
                    strategy: StrategyKind::Mcts,
                    budget: 64,
                    ..DecodeBudget::default()
                },
            ],
        }
    }
}

impl ExperimentConfig {
    /// Minimal valid configuration.
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        Self {
            seed,
            output_dir: default_output_dir(),
            task: TaskConfig {
                kind,
                max_operand: TaskConfig::default_max_operand(),
                train_min_operands: TaskConfig::default_operands(),
                train_max_operands: TaskConfig::default_operands(),
                train_instances: TaskConfig::default_train_instances(),
                eval_min_operands: TaskConfig::default_eval_operands(),
                eval_max_operands: TaskConfig::default_eval_operands(),
                eval_instances: TaskConfig::default_eval_instances(),
            },
            mdp: MdpConfig::default(),
            stages: StagesConfig::default(),
            policy: ArchConfig::default(),
            pretrain: PretrainConfig::default(),
            star: StarConfig::default(),
            rewards: RewardConfig::default(),
            prm: PrmConfig::default(),
            grpo: GrpoConfig::default(),
            grpo_reward: GrpoRewardConfig::default(),
            decode: DecodeConfig::default(),
        }
    }

    pub fn mdp(&self) -> Mdp {
        self.mdp.build()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        let operand_range = 2..=9;
        for (key, v) in [
            ("task.train_min_operands", t.train_min_operands),
            ("task.train_max_operands", t.train_max_operands),
            ("task.eval_min_operands", t.eval_min_operands),
            ("task.eval_max_operands", t.eval_max_operands),
        ] {
            if !operand_range.contains(&v) {
                return Err(Error::config(key, "must lie in [2, 9]"));
            }
        }
        if t.train_min_operands > t.train_max_operands {
            return Err(Error::config("task.train_min_operands", "must be ≤ task.train_max_operands"));
        }
        if t.eval_min_operands > t.eval_max_operands {
            return Err(Error::config("task.eval_min_operands", "must be ≤ task.eval_max_operands"));
        }
        if t.max_operand > 99 {
            return Err(Error::config("task.max_operand", "must be ≤ 99"));
        }
        if t.train_instances == 0 {
            return Err(Error::config("task.train_instances", "must be ≥ 1"));
        }
        if t.eval_instances == 0 {
            return Err(Error::config("task.eval_instances", "must be ≥ 1"));
        }
        let m = &self.mdp;
        if m.max_step_tokens < 2 {
            return Err(Error::config("mdp.max_step_tokens", "must be ≥ 2"));
        }
        if m.max_actions == 0 {
            return Err(Error::config("mdp.max_actions", "must be ≥ 1"));
        }
        if m.max_context_tokens < 8 {
            return Err(Error::config("mdp.max_context_tokens", "must be ≥ 8"));
        }
        self.policy.validate("policy")?;
        self.pretrain.train.validate("pretrain.train")?;
        self.star.validate()?;
        self.rewards.validate()?;
        self.prm.arch().validate("prm")?;
        self.prm.train.validate("prm.train")?;
        if !(0.0..=1.0).contains(&self.prm.gamma) {
            return Err(Error::config("prm.gamma", "must lie in [0, 1]"));
        }
        if self.prm.proposals == 0 {
            return Err(Error::config("prm.proposals", "must be ≥ 1"));
        }
        if !(self.prm.proposal_temperature > 0.0 && self.prm.proposal_temperature.is_finite()) {
            return Err(Error::config("prm.proposal_temperature", "must be > 0"));
        }
        self.grpo.validate()?;
        for (i, b) in self.decode.budgets.iter().enumerate() {
            b.validate().map_err(|e| match e {
                Error::Config { key, constraint } => Error::config(
                    key.replacen("decode.", &format!("decode.budgets[{i}]."), 1),
                    constraint,
                ),
                e => e,
            })?;
        }

        let s = &self.stages;
        if s.train_prm && self.prm.mode == ValueMode::Classifier && !s.star {
            return Err(Error::config(
                "stages.train_prm",
                "a classifier PRM trains on STaR step labels, so stages.star must be enabled",
            ));
        }
        let needs_prm = |b: &DecodeBudget| match b.strategy {
            StrategyKind::Greedy => false,
            StrategyKind::BestOfN => b.scorer == ScorerKind::Prm,
            StrategyKind::Beam => b.lambda < 1.0,
            StrategyKind::Mcts | StrategyKind::BestOfMcts => true,
        };
        if s.decode_eval && !s.train_prm {
            if let Some(i) = self.decode.budgets.iter().position(needs_prm) {
                return Err(Error::config(
                    format!("decode.budgets[{i}]"),
                    "strategy needs a PRM, so stages.train_prm must be enabled",
                ));
            }
        }
        if s.grpo && self.grpo_reward.source == RewardSource::Prm {
            if !s.train_prm {
                return Err(Error::config(
                    "grpo_reward.source",
                    "PRM rewards need stages.train_prm enabled",
                ));
            }
            if self.prm.mode != ValueMode::Classifier {
                return Err(Error::config(
                    "grpo_reward.source",
                    "PRM rewards need prm.mode = \"classifier\"",
                ));
            }
        }
        Ok(())
    }

    /// Canonical TOML; `parse_config(to_toml(c)) == c` and re-serializing
    /// reproduces the same bytes.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

/// Parses and validates configuration text. Unknown keys are fatal.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let key = missing_or_unknown_key(&msg).unwrap_or_else(|| "<config>".into());
        Error::config(key, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn missing_or_unknown_key(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let end = start + msg[start..].find('`')?;
    Some(msg[start..end].to_string())
}

/// A parsed configuration together with the exact bytes it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub bytes: Vec<u8>,
}

impl LoadedConfig {
    /// Uses the canonical serialization as the source bytes.
    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let bytes = config.to_toml().into_bytes();
        Ok(Self { config, bytes })
    }

    /// Replaces the master seed; the source bytes become the canonical
    /// serialization of the overridden configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if seed != self.config.seed {
            self.config.seed = seed;
            self.bytes = self.config.to_toml().into_bytes();
        }
        self
    }

    pub fn with_output_dir(mut self, dir: &Path) -> Self {
        self.config.output_dir = dir.to_path_buf();
        self
    }
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = fs::read(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::config("<config>", format!("{} is not UTF-8", path.display())))?;
    let config = parse_config(text)?;
    Ok(LoadedConfig { config, bytes })
}
