//! Noise schedule, toy denoiser, denoising objective and DDIM sampler.

mod denoiser;
mod latent;
mod sampler;
mod schedule;

pub use denoiser::{Block, DenoiserConfig, Region, ToyDenoiser};
pub use latent::{sidecar_path, LatentSample, Provenance};
pub use sampler::{sample, InfluenceRecord, Probes, SampleOptions, SampleRun, StepProbe};
pub use schedule::NoiseSchedule;

use crate::adapters::AdapterRegistry;
use crate::attention::{TapeInjection, TapeLayerAdapters, TokenMask};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::text::TokenSequence;

/// Places every registered adapter on `tape` as constants, one entry per
/// model layer.
pub(crate) fn registry_on_tape(
    tape: &mut Tape,
    registry: &AdapterRegistry,
    masks: &[TokenMask],
    layers: usize,
    d_model: usize,
    d_text: usize,
) -> Result<Vec<TapeLayerAdapters>> {
    for a in registry.adapters() {
        if a.d_model != d_model || a.d_text != d_text || a.layers.iter().any(|l| l.layer >= layers) {
            return Err(Error::Config(format!(
                "adapter `{}` does not fit the model ({} layers, d_model {d_model}, d_text {d_text})",
                a.concept.name, layers
            )));
        }
    }
    let mut out = vec![TapeLayerAdapters::default(); layers];
    for (l, slot) in out.iter_mut().enumerate() {
        let inj = registry.layer_injections(l, masks);
        for (pair, mask) in inj.key {
            slot.key.push(TapeInjection {
                a: tape.constant(pair.a.clone()),
                b: tape.constant(pair.b.clone()),
                columns: mask.columns().to_vec(),
            });
        }
        for (pair, mask) in inj.value {
            slot.value.push(TapeInjection {
                a: tape.constant(pair.a.clone()),
                b: tape.constant(pair.b.clone()),
                columns: mask.columns().to_vec(),
            });
        }
        for pair in inj.query {
            slot.query.push((tape.constant(pair.a.clone()), tape.constant(pair.b.clone())));
        }
        for pair in inj.output {
            slot.output.push((tape.constant(pair.a.clone()), tape.constant(pair.b.clone())));
        }
    }
    Ok(out)
}

/// `mean((eps - eps_hat)^2)` on a tape.
pub(crate) fn tape_denoise_loss(
    tape: &mut Tape,
    model: &ToyDenoiser,
    z0: &Matrix,
    t: usize,
    eps: &Matrix,
    x: Var,
    adapters: &[TapeLayerAdapters],
) -> Result<Var> {
    if z0.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "denoise_loss",
            left: z0.shape(),
            right: eps.shape(),
        });
    }
    let zt = model.schedule().noise(z0, t, eps)?;
    let fwd = model.forward_tape(tape, &zt, t, x, adapters)?;
    let target = tape.constant(eps.clone());
    let diff = tape.sub(target, fwd.eps)?;
    Ok(tape.mean_square(diff))
}

/// Noise prediction `eps_theta(z_t, t, c)` with the registry composed.
pub fn predict_noise(
    model: &ToyDenoiser,
    registry: &AdapterRegistry,
    seq: &TokenSequence,
    zt: &Matrix,
    t: usize,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let masks = registry.masks(seq);
    let cfg = model.config();
    let adapters = registry_on_tape(&mut tape, registry, &masks, model.layers(), cfg.d_model, cfg.d_text)?;
    let x = tape.constant(seq.x().clone());
    let fwd = model.forward_tape(&mut tape, zt, t, x, &adapters)?;
    Ok(tape.value(fwd.eps).clone())
}

/// Denoising objective `mean((eps - eps_theta(z_t, t, c))^2)` for one draw.
pub fn denoise_loss(
    model: &ToyDenoiser,
    registry: &AdapterRegistry,
    seq: &TokenSequence,
    z0: &Matrix,
    t: usize,
    eps: &Matrix,
) -> Result<f64> {
    let mut tape = Tape::new();
    let masks = registry.masks(seq);
    let cfg = model.config();
    let adapters = registry_on_tape(&mut tape, registry, &masks, model.layers(), cfg.d_model, cfg.d_text)?;
    let x = tape.constant(seq.x().clone());
    let loss = tape_denoise_loss(&mut tape, model, z0, t, eps, x, &adapters)?;
    tape.value(loss).item()
}
