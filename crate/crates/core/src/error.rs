use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by operation #{index} ({op})")]
    NonFinite { index: usize, op: &'static str },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("negative Fisher entry {value} at index {index}")]
    NegativeFisher { index: usize, value: f32 },
    #[error("batch has no masked positions")]
    NoMaskedPositions,
    #[error("row {0} contains only padding")]
    AllPadRow(usize),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("invalid transition table: {0}")]
    InvalidTable(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing strategy state: {0}")]
    MissingStrategyState(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("checkpoint was produced for a different model config ({found} vs {expected})")]
    IncompatibleCheckpoint { expected: String, found: String },
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("training diverged at step {step}: loss {loss} stayed above 10x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("non-finite parameter update at index {0}")]
    NonFiniteUpdate(usize),
    #[error("label distribution degenerate after {0} attempts")]
    DegenerateLabels(usize),
    #[error("probe tasks use different label rules")]
    LabelRuleMismatch,
    #[error("missing prerequisite artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    DigestMismatch(String),
    #[error(
        "corpus cache {} was written with seed {found_seed}, config expects seed {expected_seed} ({detail}); pass --force to overwrite",
        path.display()
    )]
    CorpusHeaderMismatch {
        path: PathBuf,
        found_seed: u64,
        expected_seed: u64,
        detail: String,
    },
    #[error("no runs found under {}", .0.display())]
    NoRuns(PathBuf),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
