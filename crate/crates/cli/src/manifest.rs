//! Run manifest: everything needed to regenerate the files of one command.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use leo_collab::config::{sha256_hex, RunConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// Subcommand and its arguments.
    pub command: serde_json::Value,
    /// `--set` overrides, already folded into `config`.
    pub overrides: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    /// Resolved configuration as TOML.
    pub config: String,
    pub versions: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, FileRecord>,
    /// Written file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new<C: Serialize>(cfg: &RunConfig, command: &C, overrides: &[String]) -> anyhow::Result<Self> {
        let versions = BTreeMap::from([
            ("leocollab".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("leo-collab".to_string(), leo_collab::VERSION.to_string()),
        ]);
        Ok(Manifest {
            command: serde_json::to_value(command)?,
            overrides: overrides.to_vec(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.to_toml(),
            versions,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("{} is not a run manifest", path.display()))
    }

    pub fn input(&mut self, name: &str, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(name.to_string(), FileRecord { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    /// Writes `name` under `dir` and records its digest.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn finish(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}
