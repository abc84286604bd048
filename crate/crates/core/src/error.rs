use std::path::PathBuf;

use thiserror::Error;

use crate::ClassId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: class {class_id} assigned to both {first} and {second} splits")]
    SplitOverlap {
        path: PathBuf,
        line: usize,
        class_id: ClassId,
        first: String,
        second: String,
    },

    #[error("class {class_id} has {have} examples, needs at least {need} (first seen at line {line})")]
    InsufficientExamples {
        class_id: ClassId,
        have: usize,
        need: usize,
        line: usize,
    },

    #[error("class {class_id} has no descriptions")]
    MissingDescriptions { class_id: ClassId },

    #[error("description embeddings have mixed dimensions: expected {expected}, found {found} at line {line}")]
    MixedDimensions {
        expected: usize,
        found: usize,
        line: usize,
    },

    #[error("mixed description kinds: {0}")]
    MixedDescriptionKinds(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("split has {have} classes, episode needs {need}")]
    TooFewClasses { have: usize, need: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("unknown architecture id `{0}`")]
    UnknownArchitecture(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint version mismatch: expected {expected}, found `{found}`")]
    CheckpointVersion { expected: String, found: String },

    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("training diverged in {stage} at epoch {epoch}, step {step}; last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Divergence {
        stage: String,
        epoch: usize,
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier for the error kind, used by the CLI's one-line error output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Malformed { .. } => "malformed",
            Error::SplitOverlap { .. } => "split-overlap",
            Error::InsufficientExamples { .. } => "insufficient-examples",
            Error::MissingDescriptions { .. } => "missing-descriptions",
            Error::MixedDimensions { .. } => "mixed-dimensions",
            Error::MixedDescriptionKinds(_) => "mixed-description-kinds",
            Error::DegenerateVector(_) => "degenerate-vector",
            Error::TooFewClasses { .. } => "too-few-classes",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::UnknownArchitecture(_) => "unknown-architecture",
            Error::InvalidConfig(_) => "invalid-config",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::CheckpointVersion { .. } => "checkpoint-version",
            Error::CheckpointCorrupt(_) => "checkpoint-corrupt",
            Error::Divergence { .. } => "divergence",
            Error::Serde(_) => "serde",
        }
    }
}
