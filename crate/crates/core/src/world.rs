//! A complete toy setup: vocabulary, frozen denoiser and class regions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserConfig, Region, ToyDenoiser};
use crate::error::{Error, Result};
use crate::text::{build_vocab, ConceptBinding, TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub word: String,
    /// Quadrant of the patch grid the class occupies (0..4, row-major).
    pub quadrant: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub words: Vec<String>,
    pub classes: Vec<ClassSpec>,
    pub rare_tokens: Vec<String>,
    pub model: DenoiserConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let words = ["a", "an", "and", "photo", "of", "on", "the", "with", "."];
        let classes = [("dog", 0), ("cat", 1), ("vase", 2), ("toy", 3), ("bowl", 0), ("teapot", 1)];
        WorldConfig {
            seed: 7,
            words: words.iter().map(|s| s.to_string()).collect(),
            classes: classes
                .iter()
                .map(|(w, q)| ClassSpec {
                    word: w.to_string(),
                    quadrant: *q,
                })
                .collect(),
            rare_tokens: (1..=8).map(|i| format!("<v{i}>")).collect(),
            model: DenoiserConfig::default(),
        }
    }
}

impl WorldConfig {
    /// Every vocabulary word in table order.
    pub fn all_words(&self) -> Vec<String> {
        let mut out = self.words.clone();
        out.extend(self.classes.iter().map(|c| c.word.clone()));
        out.extend(self.rare_tokens.iter().cloned());
        out
    }
}

/// Vocabulary plus frozen model, built deterministically from a
/// [`WorldConfig`].
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocabulary,
    pub model: ToyDenoiser,
    regions: BTreeMap<TokenId, Region>,
}

impl World {
    pub fn build(config: WorldConfig) -> Result<Self> {
        let vocab = build_vocab(config.seed, config.model.d_text, &config.all_words())?;
        Self::with_vocab(config, vocab)
    }

    /// Builds the model around an existing vocabulary (which must contain the
    /// configured class words).
    pub fn with_vocab(config: WorldConfig, vocab: Vocabulary) -> Result<Self> {
        let g = config.model.grid;
        let mut regions = BTreeMap::new();
        for c in &config.classes {
            if c.quadrant >= 4 {
                return Err(Error::Config(format!("class `{}` has quadrant {} (expected 0..4)", c.word, c.quadrant)));
            }
            regions.insert(vocab.require(&c.word)?, Region::quadrant(g, c.quadrant));
        }
        let anchors: Vec<(TokenId, Region)> = regions.iter().map(|(t, r)| (*t, *r)).collect();
        let model = ToyDenoiser::new(config.model.clone(), &vocab, &anchors, config.seed.wrapping_add(1))?;
        Ok(World {
            config,
            vocab,
            model,
            regions,
        })
    }

    /// Template region of a class token.
    pub fn region_of(&self, class: TokenId) -> Option<Region> {
        self.regions.get(&class).copied()
    }

    pub fn concept_region(&self, concept: &ConceptBinding) -> Result<Region> {
        self.region_of(concept.class)
            .ok_or_else(|| Error::RegionUndefined(concept.name.clone()))
    }

    /// Binding `<name>` -> (`rare`, `class`) against this world's vocabulary.
    pub fn binding(&self, name: &str, rare: &str, class: &str) -> Result<ConceptBinding> {
        ConceptBinding::from_words(&self.vocab, name, rare, class)
    }

    pub fn grid(&self) -> usize {
        self.config.model.grid
    }
}
