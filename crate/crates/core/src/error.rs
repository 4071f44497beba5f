use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid difficulty proportions: {0}")]
    InvalidProportions(String),
    #[error("vocabulary too small: {0}")]
    VocabularyTooSmall(String),
    #[error("action index {index} out of vocabulary of size {size}")]
    ActionOutOfVocabulary { index: usize, size: usize },
    #[error("transition requested after the episode terminated (task {0})")]
    AfterTermination(String),
    #[error("state belongs to task {state} but task {task} was given")]
    TaskMismatch { task: String, state: String },
    #[error("trajectory has not terminated and is shorter than the horizon")]
    Unfinished,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("invalid rubric weights: {0}")]
    InvalidWeights(String),
    #[error("invalid thresholds: gamma_low={low} must be < gamma_high={high}, both in [0,1]")]
    InvalidThresholds { low: f64, high: f64 },
    #[error("score lists misaligned with trajectory: {0}")]
    Misaligned(String),
    #[error("candidate selection requires a failed trajectory, {0} has outcome 1")]
    SuccessfulTrajectory(String),
    #[error("replay diverged from stored trajectory {trajectory} at step {step}")]
    ReplayDivergence { trajectory: String, step: usize },
    #[error("chosen and rejected actions are identical ({0})")]
    DegeneratePair(String),
    #[error("missing inputs for {kind}: {what}")]
    MissingInput { kind: &'static str, what: String },
    #[error("round mismatch: dataset round {dataset}, failed set round {failed}")]
    RoundMismatch { dataset: usize, failed: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("remote scorer timed out after {attempts} attempt(s)")]
    RemoteTimeout { attempts: usize },
    #[error("remote scorer failed after {attempts} attempt(s): {message}")]
    RemoteFailed { attempts: usize, message: String },
    #[error("malformed remote scorer response: {0}")]
    MalformedResponse(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("schema mismatch in {}: expected version {expected}, found {found}", path.display())]
    SchemaMismatch { path: PathBuf, expected: u32, found: u32 },
    #[error("corrupt artifact {}: {message}", path.display())]
    CorruptArtifact { path: PathBuf, message: String },
    #[error("bad parameter file {}: {message}", path.display())]
    BadParameterFile { path: PathBuf, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable kind used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidProportions(_) => "invalid_proportions",
            Error::VocabularyTooSmall(_) => "vocabulary_too_small",
            Error::ActionOutOfVocabulary { .. } => "action_out_of_vocabulary",
            Error::AfterTermination(_) => "after_termination",
            Error::TaskMismatch { .. } => "task_mismatch",
            Error::Unfinished => "unfinished",
            Error::NonFinite(_) => "non_finite",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::InvalidWeights(_) => "invalid_weights",
            Error::InvalidThresholds { .. } => "invalid_thresholds",
            Error::Misaligned(_) => "misaligned",
            Error::SuccessfulTrajectory(_) => "successful_trajectory",
            Error::ReplayDivergence { .. } => "replay_divergence",
            Error::DegeneratePair(_) => "degenerate_pair",
            Error::MissingInput { .. } => "missing_input",
            Error::RoundMismatch { .. } => "round_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::RemoteTimeout { .. } => "remote_timeout",
            Error::RemoteFailed { .. } => "remote_failed",
            Error::MalformedResponse(_) => "malformed_response",
            Error::Config { .. } => "config",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::SchemaMismatch { .. } => "schema_mismatch",
            Error::CorruptArtifact { .. } => "corrupt_artifact",
            Error::BadParameterFile { .. } => "bad_parameter_file",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
