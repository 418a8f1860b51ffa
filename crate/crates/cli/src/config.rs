use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tara_core::training::{DatasetSpec, GradcheckConfig, TrainConfig};
use tara_core::world::{World, WorldConfig};
use tara_core::Vocabulary;

/// Everything a command may read from a config file. Missing fields take the
/// built-in defaults; command-line flags are applied on top afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Seed for the command's own randomness (training, templates, sampling).
    pub seed: Option<u64>,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub sampler_steps: usize,
    pub top_fraction: f64,
    pub gradcheck: GradcheckConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            seed: None,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetSpec::default(),
            sampler_steps: 50,
            top_fraction: tara_core::analysis::DEFAULT_TOP_FRACTION,
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl CliConfig {
    /// Reads JSON or TOML by extension; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?,
            Some("json") => serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?,
            _ => bail!(ConfigError(format!("{}: config must be .json or .toml", path.display()))),
        };
        Ok(cfg)
    }

    /// Flag, then config file, then `TARA_SEED`, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> anyhow::Result<u64> {
        self.resolve_seed_or(flag, 0)
    }

    pub fn resolve_seed_or(&self, flag: Option<u64>, fallback: u64) -> anyhow::Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var("TARA_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| ConfigError(format!("TARA_SEED must be an unsigned integer, got `{v}`")).into()),
            Err(_) => Ok(fallback),
        }
    }

    pub fn build_world(&self, vocab: Option<&Path>) -> anyhow::Result<World> {
        let world = match vocab {
            Some(p) => World::with_vocab(self.world.clone(), Vocabulary::load(p)?)?,
            None => World::build(self.world.clone())?,
        };
        Ok(world)
    }
}

/// Marks errors that should exit with the configuration status.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}
