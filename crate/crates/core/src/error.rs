use std::path::PathBuf;

/// Errors produced by the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix data length {len} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("loss node must be a 1x1 scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("duplicate vocabulary word `{0}`")]
    DuplicateWord(String),

    #[error("invalid concept binding: {0}")]
    InvalidBinding(String),

    #[error("rare token `{0}` is bound to more than one adapter")]
    DuplicateRareToken(String),

    #[error("rank {rank} exceeds min(d_model, d_text) = {limit}")]
    RankTooLarge { rank: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("prompt is missing the {what} token for concept `{concept}`")]
    MissingToken { concept: String, what: &'static str },

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("malformed adapter file at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("no probes were collected for this run")]
    MissingProbes,

    #[error("empty step range")]
    EmptyStepRange,

    #[error("region undefined for concept `{0}`")]
    RegionUndefined(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
