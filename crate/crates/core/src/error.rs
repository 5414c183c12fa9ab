use thiserror::Error;

/// Error type shared by every subsystem in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("parameter node {0} does not participate in the graph reaching the output")]
    DetachedParameter(usize),

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("need at least {needed} users, got {got}")]
    InsufficientUsers { needed: usize, got: usize },

    #[error("user {user} has {got} episodes, need at least {needed} for episode-split evaluation")]
    InsufficientEpisodes { user: usize, needed: usize, got: usize },

    #[error("training diverged at iteration {iter}: {detail}")]
    Divergence { iter: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input for {0}")]
    DegenerateInput(&'static str),

    #[error("model kind {0} does not produce user embeddings")]
    NoEmbeddings(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
