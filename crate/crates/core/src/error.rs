use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),

    #[error("degenerate rotation at frame {frame}, joint {joint}")]
    DegenerateJoint { frame: usize, joint: usize },

    #[error("sequence too short: need at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("timestep {t} out of range [1, {max}]")]
    Timestep { t: usize, max: usize },

    #[error("unknown schedule kind `{0}`")]
    UnknownSchedule(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("empty music beat list")]
    EmptyBeats,

    #[error("need at least {needed} sequences, got {got}")]
    TooFewSequences { needed: usize, got: usize },

    #[error("rank-deficient design matrix (rank {rank} < {cols})")]
    RankDeficient { rank: usize, cols: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite loss at step {step}: {details}")]
    NonFiniteLoss { step: usize, details: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("frame-count mismatch: motion has {motion} frames, music has {music}")]
    Alignment { motion: usize, music: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the variant; a stage wrapper reports
    /// the kind of the error it wraps.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateRotation(_) | Error::DegenerateJoint { .. } => "degenerate_rotation",
            Error::TooShort { .. } => "too_short",
            Error::Shape { .. } => "shape",
            Error::Timestep { .. } => "timestep",
            Error::UnknownSchedule(_) => "unknown_schedule",
            Error::Config { .. } => "config",
            Error::Stage { source, .. } => source.kind(),
            Error::EmptyBeats => "empty_beats",
            Error::TooFewSequences { .. } => "too_few_sequences",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Invalid(_) => "invalid",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Format { .. } => "format",
            Error::Alignment { .. } => "alignment",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn shape(context: &str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context: context.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn config(field: &str, reason: impl ToString) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
