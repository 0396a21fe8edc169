//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, rejected before any compute starts.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller violated an operation contract (mismatched shapes, bad ids, ...).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A schedule coefficient made the requested operation undefined.
    #[error("singular schedule: {0}")]
    SingularSchedule(String),

    /// A loss term or gradient evaluated to NaN/inf during synthesis.
    #[error("non-finite {term} in round {round} at timestep {timestep}")]
    NonFinite {
        term: String,
        round: usize,
        timestep: usize,
    },

    /// Training loss stopped improving for longer than the configured patience.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// A trained model failed the accuracy floor declared in its config.
    #[error("accuracy floor not reached: got {got:.4}, required {floor:.4}")]
    AccuracyFloor { got: f64, floor: f64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("class-space mismatch: {0}")]
    ClassSpaceMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A dependent stage consumed an artifact produced under a different config.
    #[error("config hash mismatch for {artifact}: artifact has {found}, current config is {expected}")]
    HashMismatch {
        artifact: String,
        found: String,
        expected: String,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("distillation aborted: {0}")]
    DistillAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    /// Machine-readable error record, printed to stderr by the CLI.
    pub fn to_json(&self) -> String {
        let kind = match self {
            Error::Config(_) => "config",
            Error::Contract { .. } => "contract",
            Error::SingularSchedule(_) => "singular_schedule",
            Error::NonFinite { .. } => "non_finite",
            Error::Divergence(_) => "divergence",
            Error::AccuracyFloor { .. } => "accuracy_floor",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::ClassSpaceMismatch(_) => "class_space_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::Manifest(_) => "manifest",
            Error::DistillAborted(_) => "distill_aborted",
            Error::Io(_) => "io",
            Error::Json(_) => "serialization",
        };
        serde_json::json!({ "error": { "kind": kind, "message": self.to_string() } }).to_string()
    }
}
