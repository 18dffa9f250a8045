//! Compliance profiles: store configuration plus the erase and compaction
//! behaviour applied to every delete.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ErasureMode;
use crate::store::{AccessControl, CompactLevel, Logging, StoreConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Compaction {
    None,
    /// Incremental compaction of sealed segments at or above this dead ratio,
    /// checked after every delete.
    Autovacuum { min_dead_ratio: f64 },
    /// A full rewrite after every delete.
    FullAfterErase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplianceProfile {
    pub name: String,
    pub access_control: AccessControl,
    pub logging: Logging,
    pub encrypted_at_rest: bool,
    pub erase_mode: ErasureMode,
    pub compaction: Compaction,
    /// Scrub values from the action ledger on erase. Only strong and
    /// permanent deletes do this.
    pub redact_logs_on_erase: bool,
    #[serde(default)]
    pub segment_max_bytes: Option<u64>,
}

pub const BUILTIN_PROFILES: [&str; 3] = ["P_Base", "P_GBench", "P_SYS"];

impl ComplianceProfile {
    pub fn builtin(name: &str) -> Result<Self> {
        let p = match name {
            "P_Base" => ComplianceProfile {
                name: name.into(),
                access_control: AccessControl::RoleBased,
                logging: Logging::RowLevelCsv,
                encrypted_at_rest: true,
                erase_mode: ErasureMode::Delete,
                compaction: Compaction::Autovacuum { min_dead_ratio: 0.2 },
                redact_logs_on_erase: false,
                segment_max_bytes: None,
            },
            "P_GBench" => ComplianceProfile {
                name: name.into(),
                access_control: AccessControl::MetadataJoin,
                logging: Logging::FullQuery,
                encrypted_at_rest: true,
                erase_mode: ErasureMode::Delete,
                compaction: Compaction::None,
                redact_logs_on_erase: false,
                segment_max_bytes: None,
            },
            "P_SYS" => ComplianceProfile {
                name: name.into(),
                access_control: AccessControl::FineGrained,
                logging: Logging::FullQueryPlusPolicyLog,
                encrypted_at_rest: true,
                erase_mode: ErasureMode::StrongDelete,
                compaction: Compaction::FullAfterErase,
                redact_logs_on_erase: true,
                segment_max_bytes: None,
            },
            _ => return Err(Error::UnknownProfile(name.to_owned())),
        };
        Ok(p)
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let p: ComplianceProfile = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let redacts = self.erase_mode >= ErasureMode::StrongDelete;
        if self.redact_logs_on_erase != redacts {
            return Err(Error::Config(format!(
                "redact_logs_on_erase = {} does not match erase mode {}",
                self.redact_logs_on_erase, self.erase_mode
            )));
        }
        if let Compaction::Autovacuum { min_dead_ratio } = self.compaction {
            if !(0.0..=1.0).contains(&min_dead_ratio) {
                return Err(Error::Config(format!("min_dead_ratio {min_dead_ratio} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn store_config(&self, seed: u64) -> StoreConfig {
        let mut config = StoreConfig {
            access_control: self.access_control,
            logging: self.logging,
            encrypted_at_rest: self.encrypted_at_rest,
            seed,
            ..StoreConfig::default()
        };
        if let Some(max) = self.segment_max_bytes {
            config.segment_max_bytes = max;
        }
        config
    }

    pub fn compact_level(&self) -> Option<CompactLevel> {
        match self.compaction {
            Compaction::None => None,
            Compaction::Autovacuum { .. } => Some(CompactLevel::Incremental),
            Compaction::FullAfterErase => Some(CompactLevel::Full),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for name in BUILTIN_PROFILES {
            ComplianceProfile::builtin(name).unwrap().validate().unwrap();
        }
        assert!(matches!(ComplianceProfile::builtin("P_X"), Err(Error::UnknownProfile(_))));
    }

    #[test]
    fn parse_toml_profile() {
        let text = r#"
name = "custom"
access_control = "metadata-join"
logging = "full-query"
encrypted_at_rest = false
erase_mode = "permanent_delete"
redact_logs_on_erase = true
[compaction]
kind = "autovacuum"
min_dead_ratio = 0.5
"#;
        let p = ComplianceProfile::parse(text).unwrap();
        assert_eq!(p.compaction, Compaction::Autovacuum { min_dead_ratio: 0.5 });
        assert_eq!(p.compact_level(), Some(CompactLevel::Incremental));
        let bad = text.replace("redact_logs_on_erase = true", "redact_logs_on_erase = false");
        assert!(matches!(ComplianceProfile::parse(&bad), Err(Error::Config(_))));
    }
}
