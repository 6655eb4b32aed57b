use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the crate. Every failure mode carries enough
/// context to be actionable without a backtrace, and maps to a stable
/// process exit code via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to {action} {path}: {source}")]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:02x?}, expected 4d 53 43 46 (\"MSCF\")")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported flow file version {version}, expected 1")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error(
        "{path}: truncated payload: header declares {expected} bytes after \
         the header, file holds {actual}"
    )]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error(
        "{path}: frame dimensions overflow addressable memory \
         ({width} x {height} x {frames} frames)"
    )]
    DimensionOverflow {
        path: PathBuf,
        width: u32,
        height: u32,
        frames: u32,
    },

    #[error("{path}: zero {what} in header (width, height and frame count must be >= 1)")]
    ZeroDimension { path: PathBuf, what: &'static str },

    #[error("{path}:{line}: invalid label {content:?}, expected 0 or 1 per line")]
    InvalidLabel {
        path: PathBuf,
        line: usize,
        content: String,
    },

    #[error("{what}: expected {expected} values, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("region grid side {side}px exceeds frame dimensions {width}x{height}")]
    RegionLargerThanFrame {
        side: usize,
        width: usize,
        height: usize,
    },

    #[error("empty region: no velocity vectors to aggregate")]
    EmptyRegion,

    #[error("history too short: got {actual} frames, need at least {min}")]
    HistoryTooShort { actual: usize, min: usize },

    #[error("sequence of {frames} frames is shorter than one snippet of {snippet} frames")]
    SequenceTooShort { frames: usize, snippet: usize },

    #[error("config field `{field}` invalid: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("failed to parse config {path}: {reason}")]
    ConfigParse { path: PathBuf, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("dataset is empty: no snippets to train on")]
    EmptyDataset,

    #[error("non-finite loss at epoch {epoch}, batch {batch}: optimization diverged")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("gradient check failed: {failures} of {checked} sampled coordinates exceeded tolerance")]
    GradCheckFailed { failures: usize, checked: usize },

    #[error("labels contain a single class ({class}); ROC metrics need both positives and negatives")]
    SingleClassLabels { class: u8 },

    #[error("scores and labels disagree: {scores} scores vs {labels} labels")]
    ScoreLabelMismatch { scores: usize, labels: usize },

    #[error("score list is empty")]
    EmptyScores,

    #[error("score {value} at index {index} is not finite")]
    NonFiniteScore { index: usize, value: f64 },

    #[error("metric threshold not met: {what} = {actual:.6}, required {requirement}")]
    MetricThreshold {
        what: &'static str,
        actual: f64,
        requirement: String,
    },

    #[error("checkpoint incompatible with current config: {reason}")]
    CheckpointMismatch { reason: String },

    #[error("failed to parse checkpoint {path}: {reason}")]
    CheckpointParse { path: PathBuf, reason: String },

    #[error("{path}:{line}: malformed score record: {reason}")]
    MalformedScores {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid scenario plan: {reason}")]
    InvalidPlan { reason: String },

    #[error("{context}: {reason}")]
    Internal {
        context: &'static str,
        reason: String,
    },
}

impl Error {
    /// Stable process exit code for the CLI.
    ///
    /// 0 success, 2 config errors, 3 I/O and format errors, 4 gradient-check
    /// failure, 5 metric threshold not met, 6 checkpoint/config mismatch,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig { .. }
            | Error::ConfigParse { .. }
            | Error::InvalidPlan { .. } => 2,
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::DimensionOverflow { .. }
            | Error::ZeroDimension { .. }
            | Error::InvalidLabel { .. }
            | Error::CheckpointParse { .. }
            | Error::MalformedScores { .. } => 3,
            Error::GradCheckFailed { .. } => 4,
            Error::MetricThreshold { .. } => 5,
            Error::CheckpointMismatch { .. } => 6,
            _ => 1,
        }
    }

    pub(crate) fn io(action: &'static str, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            action,
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
