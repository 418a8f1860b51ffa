use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Region;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::text::{encode_prompt, ConceptBinding, TokenSequence, Vocabulary};
use crate::world::World;

pub const MIN_REFERENCES: usize = 4;
pub const MAX_REFERENCES: usize = 6;

/// How synthetic concepts are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub references: usize,
    /// Standard deviation of the concept's feature vector.
    pub amplitude: f64,
    /// Standard deviation of per-reference jitter, applied to every patch.
    pub jitter: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            references: 5,
            amplitude: 1.0,
            jitter: 0.1,
        }
    }
}

/// Reference latents for one concept plus its training prompt.
#[derive(Clone, Debug)]
pub struct ConceptDataset {
    pub concept: ConceptBinding,
    pub region: Region,
    /// Noise-free template: a feature vector repeated over the region, zero
    /// elsewhere.
    pub template: Matrix,
    pub references: Vec<Matrix>,
    /// Prompt words without BOS/EOS, "a <rare> <class> .".
    pub prompt: Vec<String>,
}

impl ConceptDataset {
    pub fn new(
        concept: ConceptBinding,
        region: Region,
        template: Matrix,
        references: Vec<Matrix>,
        prompt: Vec<String>,
    ) -> Result<Self> {
        if !(MIN_REFERENCES..=MAX_REFERENCES).contains(&references.len()) {
            return Err(Error::Config(format!(
                "concept `{}` has {} references, expected {MIN_REFERENCES}..={MAX_REFERENCES}",
                concept.name,
                references.len()
            )));
        }
        if let Some(r) = references.iter().find(|r| r.shape() != template.shape()) {
            return Err(Error::Shape {
                op: "concept_reference",
                left: r.shape(),
                right: template.shape(),
            });
        }
        Ok(ConceptDataset {
            concept,
            region,
            template,
            references,
            prompt,
        })
    }

    /// Draws a concept in the class's region of `world`.
    pub fn synthesize(world: &World, concept: ConceptBinding, spec: &DatasetSpec, seed: u64) -> Result<Self> {
        let region = world.concept_region(&concept)?;
        let (m, dm) = world.model.latent_shape();
        let g = world.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature = Matrix::gaussian(1, dm, spec.amplitude, &mut rng);
        let template = Matrix::from_fn(m, dm, |p, i| {
            if region.contains(g, p) {
                feature.get(0, i)
            } else {
                0.0
            }
        });
        let references = (0..spec.references)
            .map(|_| template.add(&Matrix::gaussian(m, dm, spec.jitter, &mut rng)))
            .collect::<Result<Vec<_>>>()?;
        let prompt = vec![
            "a".to_string(),
            world.vocab.token(concept.rare).to_string(),
            world.vocab.token(concept.class).to_string(),
            ".".to_string(),
        ];
        ConceptDataset::new(concept, region, template, references, prompt)
    }

    pub fn sequence(&self, vocab: &Vocabulary) -> Result<TokenSequence> {
        encode_prompt(vocab, std::slice::from_ref(&self.concept), &self.prompt)
    }
}
