//! Reproducibility record written next to the outputs of every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub subcommand: String,
    /// Resolved settings of the run, output locations excluded.
    pub config: BTreeMap<String, Value>,
    /// SHA-256 of `subcommand` and `config`.
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub code_version: String,
    pub wall_seconds: f64,
    pub outputs: Vec<String>,
}

/// Hash over the canonical JSON of the subcommand and its sorted settings.
pub fn config_hash(subcommand: &str, config: &BTreeMap<String, Value>) -> String {
    let canonical = serde_json::to_string(&(subcommand, config)).expect("serializable");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}

/// `<file>.manifest.json` for a file output, `<dir>/run_manifest.json` for a directory.
pub fn default_path(primary: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        primary.join("run_manifest.json")
    } else {
        let mut s = primary.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_insertion_order() {
        let mut a = BTreeMap::new();
        a.insert("lr".to_string(), Value::from(0.001));
        a.insert("scale".to_string(), Value::from(0.5));
        let mut b = BTreeMap::new();
        b.insert("scale".to_string(), Value::from(0.5));
        b.insert("lr".to_string(), Value::from(0.001));
        assert_eq!(config_hash("train", &a), config_hash("train", &b));
        assert_ne!(config_hash("train", &a), config_hash("evaluate", &a));
        b.insert("lr".to_string(), Value::from(0.002));
        assert_ne!(config_hash("train", &a), config_hash("train", &b));
    }

    #[test]
    fn default_paths() {
        assert_eq!(default_path(Path::new("out/report.json"), false), PathBuf::from("out/report.json.manifest.json"));
        assert_eq!(default_path(Path::new("ckpt"), true), PathBuf::from("ckpt/run_manifest.json"));
    }
}
