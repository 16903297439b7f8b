// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared across the crate.

use std::path::PathBuf;

/// Errors raised by generation, tracing, metric and reporting stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("step {step} out of range (chain has {len} steps)")]
    StepOutOfRange { step: usize, len: usize },

    #[error("step {step} has no corruptible site: {reason}")]
    NoCorruptionSite { step: usize, reason: String },

    #[error("no paraphrase template for {0}")]
    NoParaphrase(String),

    #[error("nonpositive perplexity: {0}")]
    NonPositivePerplexity(f64),

    #[error("degenerate calibration: mean logit sigma is {0}")]
    DegenerateCalibration(f64),

    #[error("not enough data: {0}")]
    NotEnoughData(String),

    #[error("constant row {0}: Pearson correlation undefined")]
    ConstantRow(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero path length: trajectory points are identical")]
    ZeroPathLength,

    #[error("prompt could not be parsed: {0}")]
    Prompt(String),

    #[error("duplicate record id `{0}`")]
    DuplicateRecord(String),

    #[error("split violation: chain `{0}` is not in the probing split")]
    SplitViolation(String),

    #[error("missing step-terminal data: {0}")]
    MissingStepEnds(String),

    #[error("single-class dataset: probing needs at least two labels")]
    SingleClass,

    #[error("invalid trace record `{id}`: {violations:?}")]
    InvalidRecord { id: String, violations: Vec<String> },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("stage `{stage}` failed{}: {message}", record.as_ref().map(|r| format!(" on record `{r}`")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        record: Option<String>,
        message: String,
    },

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap an error with the pipeline stage (and record) it came from.
    pub fn in_stage(self, stage: &'static str, record: Option<String>) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                record: record.or_else(|| other.record_id()),
                message: other.to_string(),
            },
        }
    }

    fn record_id(&self) -> Option<String> {
        match self {
            Error::DuplicateRecord(id) | Error::SplitViolation(id) | Error::MissingStepEnds(id) => Some(id.clone()),
            Error::InvalidRecord { id, .. } => Some(id.clone()),
            _ => None,
        }
    }
}
