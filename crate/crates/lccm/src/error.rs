//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}, row {row}, column `{column}`: cannot parse `{value}` as a number")]
    ParseCell {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("{path}, row {row}, column `{column}`: `{value}` is not a valid {expected}")]
    ParseEnum {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
        expected: String,
    },

    #[error("{path}, row {row}: duplicate identifier `{id}`")]
    DuplicateId {
        path: PathBuf,
        row: usize,
        id: String,
    },

    #[error("{path}, row {row}: `{id}` references unknown {target} `{reference}`")]
    UnknownReference {
        path: PathBuf,
        row: usize,
        id: String,
        target: String,
        reference: String,
    },

    #[error("model spec: {0}")]
    Spec(String),

    #[error("unknown variable `{name}`; valid names are: {valid:?}")]
    UnknownVariable { name: String, valid: Vec<String> },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Dimension {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("no available alternative for observation {0}")]
    NoAvailableAlternative(usize),

    #[error("log-likelihood is not finite at the initial parameters")]
    NonFiniteLoglik,

    #[error("household `{0}` has zero likelihood under every class")]
    ZeroLikelihoodHousehold(String),

    #[error("class count mismatch: expected {expected}, got {actual}")]
    ClassCountMismatch { expected: usize, actual: usize },

    #[error("no eligible observations: {0}")]
    NoEligibleObservations(String),

    #[error("all {0} starts failed")]
    AllStartsFailed(usize),

    #[error("consideration set reachable by class {class} is empty on tour `{tour_id}`")]
    EmptyChoiceSet { class: usize, tour_id: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
