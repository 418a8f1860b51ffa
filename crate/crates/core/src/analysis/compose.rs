use std::collections::BTreeMap;

use crate::adapters::{AdapterRegistry, LoraAdapter};
use crate::diffusion::{sample, Region, SampleOptions, SampleRun};
use crate::error::Result;
use crate::numerics::Matrix;
use crate::text::{encode_prompt, ConceptBinding, TokenSequence, Vocabulary};
use crate::world::World;

use super::{interference, InterferenceReport};

/// "a <v1> dog and a <v2> cat ." for the given bindings.
pub fn composed_prompt(vocab: &Vocabulary, bindings: &[ConceptBinding]) -> Vec<String> {
    let mut words = Vec::with_capacity(bindings.len() * 4 + 1);
    for (i, b) in bindings.iter().enumerate() {
        if i > 0 {
            words.push("and".to_string());
        }
        words.push("a".to_string());
        words.push(vocab.token(b.rare).to_string());
        words.push(vocab.token(b.class).to_string());
    }
    words.push(".".to_string());
    words
}

/// Solo and composed generations on one prompt.
#[derive(Clone, Debug)]
pub struct ComposeCheck {
    pub seq: TokenSequence,
    /// Sample with only one adapter registered, per concept.
    pub solo: Vec<(String, Matrix)>,
    /// Sample with every adapter registered, with probes when requested.
    pub composed: SampleRun,
    pub report: InterferenceReport,
}

/// Generates `prompt` once per adapter alone and once with all adapters
/// composed, and measures region MSE between the two per concept.
pub fn compose_check(
    world: &World,
    method: &str,
    adapters: &[LoraAdapter],
    prompt: &[String],
    opts: SampleOptions,
) -> Result<ComposeCheck> {
    let bindings: Vec<ConceptBinding> = adapters.iter().map(|a| a.concept.clone()).collect();
    let seq = encode_prompt(&world.vocab, &bindings, prompt)?;
    let registry = AdapterRegistry::from_adapters(adapters.iter().cloned())?;
    let mut regions: BTreeMap<String, Region> = BTreeMap::new();
    for b in &bindings {
        regions.insert(b.name.clone(), world.concept_region(b)?);
    }
    let solo_opts = SampleOptions { probes: false, ..opts };
    let mut solo = Vec::with_capacity(adapters.len());
    for a in adapters {
        let single = AdapterRegistry::from_adapters([a.clone()])?;
        let run = sample(&world.model, &single, &seq, solo_opts)?;
        solo.push((a.concept.name.clone(), run.sample.z));
    }
    let composed = sample(&world.model, &registry, &seq, opts)?;
    let report = interference(method, &solo, &composed.sample.z, &regions, world.grid())?;
    Ok(ComposeCheck {
        seq,
        solo,
        composed,
        report,
    })
}
