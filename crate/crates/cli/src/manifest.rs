use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance record written next to every output set. Holds digests only,
/// no timestamps, so identical runs give identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub notes: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn new<C: Serialize>(command: &'static str, config: &C) -> Result<Self> {
        let canonical = serde_json::to_vec(config)?;
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: sha256_hex(&canonical),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(label.to_string(), file_digest(path)?);
        Ok(())
    }

    /// Writes `bytes` to `dir/name` and records its digest.
    pub fn output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn note<V: Serialize>(&mut self, key: &str, value: V) -> Result<()> {
        self.notes
            .insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join("manifest.json"), text).context("writing manifest")?;
        Ok(())
    }
}
