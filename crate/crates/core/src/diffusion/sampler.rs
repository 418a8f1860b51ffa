//! Deterministic DDIM sampling (eta = 0) with optional probes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::latent::{LatentSample, Provenance};
use super::{registry_on_tape, ToyDenoiser};
use crate::adapters::{AdapterRegistry, Projection};
use crate::attention::{masked_adapter_forward, AttentionMap};
use crate::error::Result;
use crate::numerics::{Matrix, Tape};
use crate::text::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub seed: u64,
    pub steps: usize,
    /// Record attention maps and adapter influence.
    pub probes: bool,
}

/// Attention maps of every layer and head at one sampler step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepProbe {
    pub timestep: usize,
    pub maps: Vec<AttentionMap>,
}

/// L2 norm of one adapter's output column per token, for one layer and
/// projection. Adapter outputs depend only on the prompt, so the value is the
/// same at every sampler step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub adapter: String,
    pub projection: Projection,
    pub layer: usize,
    pub magnitudes: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probes {
    pub grid: usize,
    pub tokens: Vec<usize>,
    pub steps: Vec<StepProbe>,
    pub influence: Vec<InfluenceRecord>,
}

impl Probes {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::error::Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| crate::error::Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct SampleRun {
    pub sample: LatentSample,
    pub probes: Option<Probes>,
}

fn influence(registry: &AdapterRegistry, seq: &TokenSequence) -> Result<Vec<InfluenceRecord>> {
    let masks = registry.masks(seq);
    let mut out = Vec::new();
    for (adapter, mask) in registry.adapters().iter().zip(&masks) {
        for la in &adapter.layers {
            for (projection, pair) in [(Projection::Key, &la.key), (Projection::Value, &la.value)] {
                let cols = masked_adapter_forward(pair, seq.x(), mask)?;
                let magnitudes = (0..cols.cols())
                    .map(|j| cols.col(j).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                out.push(InfluenceRecord {
                    adapter: adapter.concept.name.clone(),
                    projection,
                    layer: la.layer,
                    magnitudes,
                });
            }
        }
    }
    Ok(out)
}

/// Runs the sampler from `z_T ~ N(0, I)` drawn with `opts.seed`. Identical
/// inputs give a bitwise-identical sample.
pub fn sample(
    model: &ToyDenoiser,
    registry: &AdapterRegistry,
    seq: &TokenSequence,
    opts: SampleOptions,
) -> Result<SampleRun> {
    let schedule = model.schedule();
    let timesteps = schedule.sampling_timesteps(opts.steps)?;
    let (m, dm) = model.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut z = Matrix::gaussian(m, dm, 1.0, &mut rng);
    let masks = registry.masks(seq);
    let cfg = model.config();
    let mut steps = Vec::new();

    for (i, &t) in timesteps.iter().enumerate() {
        let mut tape = Tape::new();
        let adapters = registry_on_tape(&mut tape, registry, &masks, model.layers(), cfg.d_model, cfg.d_text)?;
        let x = tape.constant(seq.x().clone());
        let fwd = model.forward_tape(&mut tape, &z, t, x, &adapters)?;
        let eps = tape.value(fwd.eps);
        if opts.probes {
            let mut maps = Vec::new();
            for (layer, heads) in fwd.maps.iter().enumerate() {
                for (head, v) in heads.iter().enumerate() {
                    maps.push(AttentionMap {
                        layer,
                        head,
                        probs: tape.value(*v).clone(),
                    });
                }
            }
            steps.push(StepProbe { timestep: t, maps });
        }
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let x0 = z.sub(&eps.scale((1.0 - ab).sqrt()))?.scale(1.0 / ab.sqrt());
        z = x0.scale(ab_prev.sqrt()).add(&eps.scale((1.0 - ab_prev).sqrt()))?;
    }

    let probes = if opts.probes {
        Some(Probes {
            grid: cfg.grid,
            tokens: seq.ids().iter().map(|t| t.0).collect(),
            steps,
            influence: influence(registry, seq)?,
        })
    } else {
        None
    };
    let sample = LatentSample::new(
        z,
        Provenance::Generated {
            seed: opts.seed,
            steps: opts.steps,
        },
    )?;
    Ok(SampleRun { sample, probes })
}
