//! Run manifests: every command records enough to reproduce its outputs
//! exactly, namely the full resolved config, every seed in play, and the
//! code version that ran.

use crate::config::ExperimentConfig;
use crate::CliError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// The subcommand that produced this run.
    pub command: String,
    /// SHA-256 of the canonical JSON serialization of `config`.
    pub config_sha256: String,
    /// The full resolved configuration, embedded for reproduction.
    pub config: ExperimentConfig,
    /// Every seed the run consumed, by role.
    pub seeds: BTreeMap<String, u64>,
    /// Crate versions of the code that ran.
    pub versions: BTreeMap<String, String>,
    /// Wall-clock duration of the command, in milliseconds.
    pub wall_ms: u128,
}

/// Hash of the canonical (serialized) form of the config.
pub fn config_hash(config: &ExperimentConfig) -> Result<String, CliError> {
    let canonical = serde_json::to_vec(config)
        .map_err(|e| CliError::Config(format!("serializing config for hashing: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(&canonical);
    Ok(format!("{:x}", hasher.finalize()))
}

impl Manifest {
    pub fn new(
        command: &str,
        config: &ExperimentConfig,
        seeds: &[(&str, u64)],
        wall_ms: u128,
    ) -> Result<Self, CliError> {
        let mut versions = BTreeMap::new();
        versions.insert("pinc-cli".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("pinc-core".into(), pinc_core::VERSION.into());
        Ok(Manifest {
            schema_version: crate::config::SCHEMA_VERSION,
            command: command.into(),
            config_sha256: config_hash(config)?,
            config: config.clone(),
            seeds: seeds.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            versions,
            wall_ms,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Config(format!("serializing manifest: {e}")))?;
        std::fs::write(path, text).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
