//! Token Alignment Loss, the combined objective, and its gradient check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, AdapterShape, AdapterTargets, FactorId, InitMode, LoraAdapter, Projection};
use crate::attention::{MaskPolicy, TapeInjection, TapeLayerAdapters};
use crate::diffusion::{tape_denoise_loss, ToyDenoiser};
use crate::error::{Error, Result};
use crate::numerics::{fd_check, Fault, FdReport, Matrix, ParamBlock, Tape, Var};
use crate::text::TokenSequence;
use crate::training::dataset::{ConceptDataset, DatasetSpec};
use crate::world::World;

/// One denoising draw: clean latent, timestep, noise.
#[derive(Clone, Debug)]
pub struct Draw {
    pub z0: Matrix,
    pub t: usize,
    pub eps: Matrix,
}

/// Rare and class positions of `adapter`'s concept; exactly one of each.
fn concept_positions(adapter: &LoraAdapter, seq: &TokenSequence) -> Result<(usize, usize)> {
    let name = &adapter.concept.name;
    let find = |tok, what: &'static str| -> Result<usize> {
        let pos = seq.positions_of(tok);
        let inner: Vec<usize> = pos.into_iter().filter(|&p| p > 0 && p + 1 < seq.len()).collect();
        match inner.as_slice() {
            [] => Err(Error::MissingToken {
                concept: name.clone(),
                what,
            }),
            [p] => Ok(*p),
            _ => Err(Error::Config(format!("prompt repeats the {what} token of `{name}`"))),
        }
    };
    Ok((find(adapter.concept.rare, "rare")?, find(adapter.concept.class, "class")?))
}

/// Adapter factors placed on a tape, in [`LoraAdapter::factors`] order.
pub(crate) struct AdapterVars {
    pub ids: Vec<FactorId>,
    pub vars: Vec<Var>,
}

impl AdapterVars {
    fn get(&self, layer: usize, projection: Projection, is_a: bool) -> Var {
        let id = FactorId { layer, projection, is_a };
        let i = self.ids.iter().position(|x| *x == id).expect("factor present");
        self.vars[i]
    }

    /// Per-layer injections with the adapter's own mask over `seq`.
    fn layers(&self, adapter: &LoraAdapter, seq: &TokenSequence, model_layers: usize) -> Vec<TapeLayerAdapters> {
        let columns = adapter.mask(seq).columns().to_vec();
        let mut out = vec![TapeLayerAdapters::default(); model_layers];
        for la in &adapter.layers {
            let l = la.layer;
            let slot = &mut out[l];
            let inj = |p| TapeInjection {
                a: self.get(l, p, true),
                b: self.get(l, p, false),
                columns: columns.clone(),
            };
            slot.key.push(inj(Projection::Key));
            slot.value.push(inj(Projection::Value));
            if la.query.is_some() {
                slot.query.push((self.get(l, Projection::Query, true), self.get(l, Projection::Query, false)));
            }
            if la.output.is_some() {
                slot.output.push((self.get(l, Projection::Output, true), self.get(l, Projection::Output, false)));
            }
        }
        out
    }
}

/// Places the factors as constants (or leaves where `trainable` says so).
pub(crate) fn adapter_on_tape(tape: &mut Tape, adapter: &LoraAdapter, trainable: impl Fn(FactorId) -> bool) -> AdapterVars {
    let mut ids = Vec::new();
    let mut vars = Vec::new();
    for (id, m) in adapter.factors() {
        let v = if trainable(id) { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        ids.push(id);
        vars.push(v);
    }
    AdapterVars { ids, vars }
}

fn check_fits(model: &ToyDenoiser, adapter: &LoraAdapter) -> Result<()> {
    let cfg = model.config();
    if adapter.d_model != cfg.d_model || adapter.d_text != cfg.d_text || adapter.layers.iter().any(|l| l.layer >= model.layers()) {
        return Err(Error::Config(format!("adapter `{}` does not fit the model", adapter.concept.name)));
    }
    Ok(())
}

/// `(1/L) sum_l |W_K x_class - (W_K x_rare + B_K A_K x_rare)|_1`.
pub(crate) fn tape_align_loss(
    tape: &mut Tape,
    model: &ToyDenoiser,
    adapter: &LoraAdapter,
    vars: &AdapterVars,
    seq: &TokenSequence,
) -> Result<Var> {
    let (rare, class) = concept_positions(adapter, seq)?;
    let x = seq.x();
    let x_r = tape.constant(Matrix::column(&x.col(rare)));
    let x_c = tape.constant(Matrix::column(&x.col(class)));
    let mut total: Option<Var> = None;
    for la in &adapter.layers {
        let w_k = tape.constant(model.blocks()[la.layer].attention.w_k.clone());
        let target = tape.matmul(w_k, x_c)?;
        let base = tape.matmul(w_k, x_r)?;
        let a = vars.get(la.layer, Projection::Key, true);
        let b = vars.get(la.layer, Projection::Key, false);
        let ax = tape.matmul(a, x_r)?;
        let delta = tape.matmul(b, ax)?;
        let shifted = tape.add(base, delta)?;
        let diff = tape.sub(target, shifted)?;
        let l1 = tape.abs_sum(diff);
        total = Some(match total {
            Some(acc) => tape.add(acc, l1)?,
            None => l1,
        });
    }
    let total = total.ok_or_else(|| Error::Config("adapter has no layers".into()))?;
    Ok(tape.scale(total, 1.0 / model.layers() as f64))
}

/// Loss terms recorded on a tape.
pub(crate) struct Objective {
    pub denoise: Var,
    pub align: Option<Var>,
    pub total: Var,
}

/// `mean_batch(denoise) + lambda * align`; the alignment term is omitted when
/// `lambda` is zero.
pub(crate) fn tape_objective(
    tape: &mut Tape,
    model: &ToyDenoiser,
    adapter: &LoraAdapter,
    vars: &AdapterVars,
    seq: &TokenSequence,
    batch: &[Draw],
    lambda: f64,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let layers = vars.layers(adapter, seq, model.layers());
    let x = tape.constant(seq.x().clone());
    let mut denoise: Option<Var> = None;
    for d in batch {
        let l = tape_denoise_loss(tape, model, &d.z0, d.t, &d.eps, x, &layers)?;
        denoise = Some(match denoise {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let denoise = tape.scale(denoise.expect("non-empty batch"), 1.0 / batch.len() as f64);
    if lambda == 0.0 {
        return Ok(Objective {
            denoise,
            align: None,
            total: denoise,
        });
    }
    let align = tape_align_loss(tape, model, adapter, vars, seq)?;
    let weighted = tape.scale(align, lambda);
    let total = tape.add(denoise, weighted)?;
    Ok(Objective {
        denoise,
        align: Some(align),
        total,
    })
}

/// Token Alignment Loss of `adapter` on `seq`.
pub fn align_loss(model: &ToyDenoiser, adapter: &LoraAdapter, seq: &TokenSequence) -> Result<f64> {
    check_fits(model, adapter)?;
    let mut tape = Tape::new();
    let vars = adapter_on_tape(&mut tape, adapter, |_| false);
    let loss = tape_align_loss(&mut tape, model, adapter, &vars, seq)?;
    tape.value(loss).item()
}

/// Combined objective `denoise + lambda * align` averaged over `batch`.
pub fn total_loss(
    model: &ToyDenoiser,
    adapter: &LoraAdapter,
    seq: &TokenSequence,
    batch: &[Draw],
    lambda: f64,
) -> Result<f64> {
    check_fits(model, adapter)?;
    let mut tape = Tape::new();
    let vars = adapter_on_tape(&mut tape, adapter, |_| false);
    let obj = tape_objective(&mut tape, model, adapter, &vars, seq, batch, lambda)?;
    tape.value(obj.total).item()
}

/// Gradients of the combined objective with respect to every adapter factor,
/// in [`LoraAdapter::factors`] order.
pub fn objective_gradients(
    model: &ToyDenoiser,
    adapter: &LoraAdapter,
    seq: &TokenSequence,
    batch: &[Draw],
    lambda: f64,
) -> Result<Vec<(FactorId, Matrix)>> {
    check_fits(model, adapter)?;
    let mut tape = Tape::new();
    let vars = adapter_on_tape(&mut tape, adapter, |_| true);
    let obj = tape_objective(&mut tape, model, adapter, &vars, seq, batch, lambda)?;
    let grads = tape.grad(obj.total)?;
    Ok(vars
        .ids
        .iter()
        .zip(&vars.vars)
        .map(|(id, v)| (*id, grads.get(*v).expect("leaf").clone()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub lambda: f64,
    pub rank: usize,
    pub step: f64,
    pub tolerance: f64,
    pub timestep: usize,
    pub seed: u64,
    /// Standard deviation of the random `B` factors, so that every block has
    /// a nonzero gradient.
    pub b_scale: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            lambda: 1.0,
            rank: 8,
            step: 1e-5,
            tolerance: 1e-4,
            timestep: 50,
            seed: 0,
            b_scale: 0.1,
        }
    }
}

/// Finite-difference check of the combined objective with respect to every
/// factor of a token-focused adapter on the world's first class.
pub fn gradcheck(world: &World, cfg: &GradcheckConfig, fault: Option<Fault>) -> Result<FdReport> {
    let class = world
        .config
        .classes
        .first()
        .ok_or_else(|| Error::Config("world has no classes".into()))?;
    let rare = world
        .config
        .rare_tokens
        .first()
        .ok_or_else(|| Error::Config("world has no rare tokens".into()))?;
    let concept = world.binding("probe", rare, &class.word)?;
    let data = ConceptDataset::synthesize(world, concept.clone(), &DatasetSpec::default(), cfg.seed)?;
    let seq = data.sequence(&world.vocab)?;
    let mcfg = world.model.config();
    let shape = AdapterShape {
        rank: cfg.rank,
        d_model: mcfg.d_model,
        d_text: mcfg.d_text,
        layers: world.model.layers(),
        targets: AdapterTargets::KeyValue,
    };
    let mut adapter = init_adapter(concept, shape, InitMode::Gaussian, MaskPolicy::TokenFocused, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for la in &mut adapter.layers {
        la.key.b = Matrix::gaussian(mcfg.d_model, cfg.rank, cfg.b_scale, &mut rng);
        la.value.b = Matrix::gaussian(mcfg.d_model, cfg.rank, cfg.b_scale, &mut rng);
    }
    let (m, dm) = world.model.latent_shape();
    let batch = [Draw {
        z0: data.references[0].clone(),
        t: cfg.timestep,
        eps: Matrix::gaussian(m, dm, 1.0, &mut rng),
    }];
    let params: Vec<ParamBlock> = adapter
        .factors()
        .into_iter()
        .map(|(id, m)| ParamBlock::new(id.name(), m.clone()))
        .collect();
    let ids: Vec<FactorId> = adapter.factors().into_iter().map(|(id, _)| id).collect();
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        if let Some(fault) = fault {
            tape.inject_fault(fault);
        }
        let av = AdapterVars {
            ids: ids.clone(),
            vars: vars.to_vec(),
        };
        Ok(tape_objective(tape, &world.model, &adapter, &av, &seq, &batch, cfg.lambda)?.total)
    };
    fd_check(f, &params, cfg.step)
}
