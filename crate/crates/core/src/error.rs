use std::path::PathBuf;

use crate::model::{EntityId, Purpose, Timestamp, UnitId};
use crate::store::ErasureStatus;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("purpose name must be non-empty")]
    EmptyPurpose,
    #[error("entity id must be non-empty")]
    EmptyEntity,
    #[error("unknown entity kind `{0}`")]
    UnknownEntityKind(String),
    #[error("policy window is empty: begin {begin} > end {end}")]
    InvalidWindow { begin: Timestamp, end: Timestamp },
    #[error("invalid data unit: {0}")]
    InvalidUnit(String),
    #[error("derivation needs at least one input")]
    EmptyInputs,
    #[error("input {0} is erased and cannot be derived from")]
    ErasedInput(UnitId),
    #[error("invalid provenance: {0}")]
    InvalidProvenance(String),
    #[error("unknown unit {0}")]
    UnknownUnit(UnitId),
    #[error("unit {0} already exists")]
    DuplicateId(UnitId),
    #[error("ledger time regression: last record at {last}, got {got}")]
    TimeRegression { last: Timestamp, got: Timestamp },
    #[error("no active policy lets {entity} act on {unit} for {purpose} at {time}")]
    PolicyDenied {
        unit: UnitId,
        entity: EntityId,
        purpose: Purpose,
        time: Timestamp,
    },
    #[error("unit {unit} is inaccessible ({status})")]
    Inaccessible { unit: UnitId, status: ErasureStatus },
    #[error("invalid transition for {unit}: {from} -> {to}")]
    InvalidTransition {
        unit: UnitId,
        from: ErasureStatus,
        to: ErasureStatus,
    },
    #[error("unit {unit} has no value at or before {time}")]
    NoValue { unit: UnitId, time: Timestamp },
    #[error("unit {0} is live")]
    UnitLive(UnitId),
    #[error("unknown workload `{0}`")]
    UnknownWorkload(String),
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("invalid workload mix: {0}")]
    InvalidMix(String),
    #[error("store directory {0} is not empty")]
    DirectoryNotEmpty(PathBuf),
    #[error("store at {0} is locked by another process")]
    Locked(PathBuf),
    #[error("corrupt {file}: {reason}")]
    Corrupt { file: String, reason: String },
    #[error("invalid time `{0}`, expected ISO-8601")]
    InvalidTime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Stable machine-readable tag used by the CLI's error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyPurpose
            | Error::EmptyEntity
            | Error::UnknownEntityKind(_)
            | Error::InvalidWindow { .. }
            | Error::InvalidUnit(_)
            | Error::InvalidTime(_) => "invalid-input",
            Error::EmptyInputs => "empty-inputs",
            Error::ErasedInput(_) => "erased-input",
            Error::InvalidProvenance(_) => "invalid-provenance",
            Error::UnknownUnit(_) => "unknown-unit",
            Error::DuplicateId(_) => "duplicate-id",
            Error::TimeRegression { .. } => "time-regression",
            Error::PolicyDenied { .. } => "policy-denied",
            Error::Inaccessible { .. } => "inaccessible",
            Error::InvalidTransition { .. } => "invalid-transition",
            Error::NoValue { .. } => "no-value",
            Error::UnitLive(_) => "unit-live",
            Error::UnknownWorkload(_) => "unknown-workload",
            Error::UnknownProfile(_) => "unknown-profile",
            Error::InvalidMix(_) => "invalid-mix",
            Error::DirectoryNotEmpty(_) => "directory-not-empty",
            Error::Locked(_) => "locked",
            Error::Corrupt { .. } => "corrupt",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Config(_) => "config",
        }
    }
}
