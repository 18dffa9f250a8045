use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::PurposeMap;

/// How accesses are authorized. Each variant performs the work of the one
/// before it plus its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessControl {
    /// Policies checked from the in-memory unit entry.
    RoleBased,
    /// Policies live in a separate `metadata.dat`; every access joins the
    /// unit with its metadata row (a second, on-disk lookup).
    MetadataJoin,
    /// Metadata join, plus every attached policy evaluated per access, the
    /// optional purpose map applied, and metadata scans evaluated against
    /// the full metadata table.
    FineGrained,
}

impl AccessControl {
    pub fn joins_metadata(self) -> bool {
        self >= AccessControl::MetadataJoin
    }

    pub fn fine_grained(self) -> bool {
        self == AccessControl::FineGrained
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AccessControl::RoleBased => "role-based",
            AccessControl::MetadataJoin => "metadata-join",
            AccessControl::FineGrained => "fine-grained",
        }
    }
}

impl fmt::Display for AccessControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AccessControl {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "role-based" => Ok(AccessControl::RoleBased),
            "metadata-join" => Ok(AccessControl::MetadataJoin),
            "fine-grained" => Ok(AccessControl::FineGrained),
            _ => Err(Error::Config(format!("unknown access control `{s}`"))),
        }
    }
}

/// Query logging depth, on top of the action ledger which is always kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Logging {
    None,
    /// One CSV row per operation in `query.csv`.
    RowLevelCsv,
    /// One JSON line per operation with query text and response digest in
    /// `query.log`.
    FullQuery,
    /// `FullQuery` plus a `policy.log` line per access listing every policy
    /// evaluated and its verdict.
    FullQueryPlusPolicyLog,
}

impl Logging {
    pub fn as_str(self) -> &'static str {
        match self {
            Logging::None => "none",
            Logging::RowLevelCsv => "row-level-csv",
            Logging::FullQuery => "full-query",
            Logging::FullQueryPlusPolicyLog => "full-query-plus-policy-log",
        }
    }
}

impl fmt::Display for Logging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Logging {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "none" => Ok(Logging::None),
            "row-level-csv" => Ok(Logging::RowLevelCsv),
            "full-query" => Ok(Logging::FullQuery),
            "full-query-plus-policy-log" => Ok(Logging::FullQueryPlusPolicyLog),
            _ => Err(Error::Config(format!("unknown logging mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub access_control: AccessControl,
    pub logging: Logging,
    pub encrypted_at_rest: bool,
    /// The active segment rolls over once it reaches this size.
    pub segment_max_bytes: u64,
    pub purpose_map: Option<PurposeMap>,
    /// Units of category `metadata` skip policy enforcement.
    pub exempt_metadata_units: bool,
    /// Seeds escrow keys, the at-rest key and sanitization passes.
    pub seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            access_control: AccessControl::RoleBased,
            logging: Logging::None,
            encrypted_at_rest: false,
            segment_max_bytes: 256 * 1024,
            purpose_map: None,
            exempt_metadata_units: true,
            seed: 0,
        }
    }
}
