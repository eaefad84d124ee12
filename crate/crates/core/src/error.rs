use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("attention row {row} has no attendable keys")]
    EmptyAttentionRow { row: usize },

    #[error("invalid target: {0}")]
    Target(String),

    #[error("every position is ignored by the loss")]
    AllIgnored,

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid expert spec: {0}")]
    ExpertSpec(String),

    #[error("patch grouping: {0}")]
    Grouping(String),

    #[error("expert order: {0}")]
    Order(String),

    #[error("fusion: {0}")]
    Fusion(String),

    #[error("positional encoding: {0}")]
    Positional(String),

    #[error("sequence of {length} tokens exceeds the decoder maximum of {max} ({budget})")]
    Overflow {
        length: usize,
        max: usize,
        budget: String,
    },

    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid sequence: {0}")]
    Sequence(String),

    #[error("non-finite loss at batch item {index}")]
    NonFiniteLoss { index: usize },

    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error("unknown expert `{0}`")]
    UnknownExpert(String),

    #[error("task: {0}")]
    Task(String),

    #[error("analysis: {0}")]
    Analysis(String),

    #[error("{0}")]
    Config(#[from] crate::harness::config::ConfigErrors),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::harness::checkpoint::CheckpointError),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Error::Shape { op, detail }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
