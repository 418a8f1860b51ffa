use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use tara_core::numerics::Fnv;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Self-description of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Command-specific facts (prompt words, checksums, method).
    pub details: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: BTreeMap<String, u64>, inputs: Vec<PathBuf>) -> anyhow::Result<Self> {
        let mut h = Fnv::default();
        h.write(command.as_bytes());
        h.write(serde_json::to_string(&config)?.as_bytes());
        for (k, v) in &seeds {
            h.write(k.as_bytes());
            h.write_u64(*v);
        }
        for p in &inputs {
            let bytes = std::fs::read(p).with_context(|| format!("reading input {}", p.display()))?;
            h.write(&bytes);
        }
        Ok(RunManifest {
            experiment_id: format!("{command}-{:016x}", h.finish()),
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds,
            inputs,
            outputs: Vec::new(),
            details: serde_json::Value::Null,
        })
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Writes the manifest into `dir`, listing outputs relative to it.
    pub fn save(&mut self, dir: &Path) -> anyhow::Result<()> {
        for p in &mut self.outputs {
            if let Ok(rel) = p.strip_prefix(dir) {
                *p = rel.to_path_buf();
            }
        }
        self.outputs.sort();
        self.outputs.dedup();
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}
