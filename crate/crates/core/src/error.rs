use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot extend a terminal state")]
    TerminalState,

    #[error("context overflow: {len} tokens exceeds the limit of {limit}")]
    ContextOverflow { len: usize, limit: usize },

    #[error("malformed action: {0}")]
    MalformedAction(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state is inconsistent with instance `{instance}`: {reason}")]
    InconsistentState { instance: String, reason: String },

    #[error("non-finite {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("search tree has {nodes} nodes, exceeding the bound of {bound}")]
    TreeTooLarge { nodes: usize, bound: usize },

    #[error("all {attempts} sampling attempts produced only truncated rollouts")]
    AllTruncated { attempts: usize },

    #[error("config `{key}`: {constraint}")]
    Config { key: String, constraint: String },

    #[error("{path}: line {line}: {reason}")]
    Records {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("stage `{stage}` may not read undeclared artifact {path}")]
    UndeclaredRead { stage: String, path: PathBuf },

    #[error("missing artifact {path} (run stage `{producer}` first)")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            constraint: constraint.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::TerminalState | Error::ContextOverflow { .. } | Error::MalformedAction(_) => {
                "mdp"
            }
            Error::Parse(_) => "parse",
            Error::Vocab(_) => "vocab",
            Error::InvalidArgument(_) | Error::InconsistentState { .. } => "invalid_argument",
            Error::NonFinite { .. } | Error::Divergence(_) => "numeric",
            Error::TreeTooLarge { .. } => "tree_too_large",
            Error::AllTruncated { .. } => "truncated",
            Error::Config { .. } => "config",
            Error::Records { .. } => "records",
            Error::Checkpoint { .. } => "checkpoint",
            Error::UndeclaredRead { .. } | Error::MissingArtifact { .. } => "artifact",
            Error::Io(_) | Error::Csv(_) => "io",
        }
    }
}

/// Why a token sequence failed to segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    EmptyQuestion,
    MissingTerminator,
    EmptyStep,
    TokensAfterEnd,
    MisplacedMarker,
    EmptyAnswer,
}

/// Structured segmentation failure naming the offending token index.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse error at token {index}: {kind:?}")]
pub struct ParseError {
    pub index: usize,
    pub kind: ParseErrorKind,
}
