//! Single-concept adapter training.

mod dataset;
mod objective;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{ConceptDataset, DatasetSpec, MAX_REFERENCES, MIN_REFERENCES};
pub use objective::{align_loss, gradcheck, objective_gradients, total_loss, Draw, GradcheckConfig};

use self::objective::{adapter_on_tape, tape_objective};
use crate::adapters::{init_adapter, AdapterShape, AdapterTargets, InitMode, LoraAdapter};
use crate::attention::MaskPolicy;
use crate::diffusion::ToyDenoiser;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape};
use crate::text::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMethod {
    /// Token-focused masking plus the alignment loss.
    Tara,
    /// Unmasked Gaussian-init adapter, denoising loss only.
    DbLora,
    /// Unmasked adapter with frozen orthonormal `A`, denoising loss only.
    Rob,
}

impl TrainMethod {
    pub fn mask_policy(self) -> MaskPolicy {
        match self {
            TrainMethod::Tara => MaskPolicy::TokenFocused,
            TrainMethod::DbLora | TrainMethod::Rob => MaskPolicy::Unmasked,
        }
    }

    pub fn init_mode(self) -> InitMode {
        match self {
            TrainMethod::Rob => InitMode::Rob,
            TrainMethod::Tara | TrainMethod::DbLora => InitMode::Gaussian,
        }
    }

    pub fn uses_alignment(self) -> bool {
        self == TrainMethod::Tara
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMethod::Tara => "tara",
            TrainMethod::DbLora => "db-lora",
            TrainMethod::Rob => "rob",
        }
    }
}

impl std::str::FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tara" => Ok(TrainMethod::Tara),
            "db-lora" => Ok(TrainMethod::DbLora),
            "rob" => Ok(TrainMethod::Rob),
            other => Err(Error::Config(format!("unknown method `{other}` (tara, db-lora, rob)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the reference set.
    pub epochs: usize,
    /// Hard cap on optimizer steps, applied after `epochs`.
    pub max_steps: Option<usize>,
    /// Weight of the alignment loss.
    pub lambda: f64,
    pub rank: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Momentum coefficient, or Adam's first-moment decay.
    pub momentum: f64,
    /// Adam's second-moment decay.
    pub beta2: f64,
    pub targets: AdapterTargets,
    /// Fixed draws used to measure losses before and after training.
    pub eval_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 1,
            epochs: 1000,
            max_steps: None,
            lambda: 1.0,
            rank: 8,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            beta2: 0.999,
            targets: AdapterTargets::KeyValue,
            eval_draws: 32,
        }
    }
}

impl TrainConfig {
    /// Settings that train a toy concept in a few hundred steps.
    pub fn desk_scale() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 120,
            optimizer: OptimizerKind::Adam,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("momentum coefficients must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Optimizer steps for a dataset of `references` samples.
    pub fn steps(&self, references: usize) -> usize {
        let per_epoch = references.div_ceil(self.batch_size);
        let n = self.epochs * per_epoch;
        self.max_steps.map_or(n, |cap| n.min(cap))
    }
}

/// Losses logged at one optimizer step (on that step's batch).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub denoise: f64,
    pub align: f64,
    pub total: f64,
}

/// Losses on the fixed evaluation draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLosses {
    pub denoise: f64,
    pub align: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub adapter: LoraAdapter,
    pub method: TrainMethod,
    pub log: Vec<LossRecord>,
    pub initial: EvalLosses,
    pub final_losses: EvalLosses,
}

impl TrainOutcome {
    pub fn denoise_reduction(&self) -> f64 {
        1.0 - self.final_losses.denoise / self.initial.denoise
    }

    pub fn align_reduction(&self) -> f64 {
        1.0 - self.final_losses.align / self.initial.align
    }
}

pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,denoise,align,total\n");
    for r in log {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.denoise, r.align, r.total));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn draw(rng: &mut ChaCha8Rng, model: &ToyDenoiser, z0: &Matrix) -> Draw {
    let t = rng.gen_range(1..=model.schedule().len());
    let (m, dm) = model.latent_shape();
    Draw {
        z0: z0.clone(),
        t,
        eps: Matrix::gaussian(m, dm, 1.0, rng),
    }
}

/// Evaluation draws: references in turn, timesteps evenly spread over the
/// schedule, noise from a seed independent of the training stream.
fn eval_draws(model: &ToyDenoiser, data: &ConceptDataset, count: usize, seed: u64) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    let t_max = model.schedule().len();
    let (m, dm) = model.latent_shape();
    (0..count)
        .map(|k| Draw {
            z0: data.references[k % data.references.len()].clone(),
            t: 1 + (k * t_max) / count.max(1) % t_max,
            eps: Matrix::gaussian(m, dm, 1.0, &mut rng),
        })
        .collect()
}

fn evaluate(model: &ToyDenoiser, adapter: &LoraAdapter, seq: &crate::text::TokenSequence, draws: &[Draw]) -> Result<EvalLosses> {
    let denoise = if draws.is_empty() {
        f64::NAN
    } else {
        total_loss(model, adapter, seq, draws, 0.0)?
    };
    Ok(EvalLosses {
        denoise,
        align: align_loss(model, adapter, seq)?,
    })
}

struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl OptimizerState {
    fn new(cfg: &TrainConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect::<Vec<_>>();
        OptimizerState {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            beta1: cfg.momentum,
            beta2: cfg.beta2,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Returns the update to subtract from parameter `i`.
    fn update(&mut self, i: usize, g: &Matrix) -> Result<Matrix> {
        match self.kind {
            OptimizerKind::Sgd => Ok(g.scale(self.lr)),
            OptimizerKind::Momentum => {
                self.m[i] = self.m[i].scale(self.beta1).add(g)?;
                Ok(self.m[i].scale(self.lr))
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                self.m[i] = self.m[i].scale(b1).add(&g.scale(1.0 - b1))?;
                self.v[i] = self.v[i].scale(b2).add(&g.map(|x| x * x).scale(1.0 - b2))?;
                let c1 = 1.0 - b1.powi(self.step);
                let c2 = 1.0 - b2.powi(self.step);
                let lr = self.lr;
                let v = &self.v[i];
                Ok(Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    lr * (self.m[i].get(r, c) / c1) / ((v.get(r, c) / c2).sqrt() + 1e-8)
                }))
            }
        }
    }
}

/// Trains a fresh adapter for `data` with the given method. Only adapter
/// factors change; `A` stays fixed for [`TrainMethod::Rob`].
pub fn train(
    model: &ToyDenoiser,
    vocab: &Vocabulary,
    data: &ConceptDataset,
    config: &TrainConfig,
    method: TrainMethod,
) -> Result<TrainOutcome> {
    config.validate()?;
    if method == TrainMethod::Tara && config.targets == AdapterTargets::AllProjections {
        return Err(Error::Config("token-focused adapters act on Key/Value only".into()));
    }
    let seq = data.sequence(vocab)?;
    let cfg = model.config();
    let shape = AdapterShape {
        rank: config.rank,
        d_model: cfg.d_model,
        d_text: cfg.d_text,
        layers: model.layers(),
        targets: config.targets,
    };
    let mut adapter = init_adapter(
        data.concept.clone(),
        shape,
        method.init_mode(),
        method.mask_policy(),
        config.seed ^ 0xada9,
    )?;
    let lambda = if method.uses_alignment() { config.lambda } else { 0.0 };
    let evals = eval_draws(model, data, config.eval_draws, config.seed);
    let initial = evaluate(model, &adapter, &seq, &evals)?;

    let frozen_a = adapter.a_frozen();
    let ids: Vec<_> = adapter.factors().into_iter().map(|(id, _)| id).collect();
    let shapes: Vec<_> = adapter.factors().into_iter().map(|(_, m)| m.shape()).collect();
    let mut opt = OptimizerState::new(config, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total_steps = config.steps(data.references.len());
    let mut log = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = Vec::new();

    for step in 0..total_steps {
        if order.len() < config.batch_size {
            let mut epoch: Vec<usize> = (0..data.references.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let batch: Vec<Draw> = order
            .drain(..config.batch_size.min(order.len()))
            .map(|i| draw(&mut rng, model, &data.references[i]))
            .collect();

        let mut tape = Tape::new();
        let vars = adapter_on_tape(&mut tape, &adapter, |id| !(frozen_a && id.is_a));
        let obj = tape_objective(&mut tape, model, &adapter, &vars, &seq, &batch, lambda).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { step },
            other => other,
        })?;
        let record = LossRecord {
            step,
            denoise: tape.value(obj.denoise).item()?,
            align: match obj.align {
                Some(a) => tape.value(a).item()?,
                None => f64::NAN,
            },
            total: tape.value(obj.total).item()?,
        };
        if !record.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        let grads = tape.grad(obj.total).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { step },
            other => other,
        })?;
        opt.step += 1;
        for (i, (id, var)) in ids.iter().zip(&vars.vars).enumerate() {
            if frozen_a && id.is_a {
                continue;
            }
            let g = grads.get(*var).expect("trainable leaf");
            let delta = opt.update(i, g);
            let factor = adapter.factor_mut(*id).expect("factor exists");
            let next = delta.and_then(|d| factor.sub(&d));
            let next = match next {
                Ok(n) if n.is_finite() => n,
                Ok(_) | Err(Error::NonFinite(_)) => return Err(Error::Divergence { step }),
                Err(e) => return Err(e),
            };
            *factor = next;
        }
        log.push(record);
    }

    let final_losses = evaluate(model, &adapter, &seq, &evals)?;
    if !final_losses.denoise.is_finite() && !evals.is_empty() {
        return Err(Error::Divergence { step: total_steps });
    }
    Ok(TrainOutcome {
        adapter,
        method,
        log,
        initial,
        final_losses,
    })
}

/// TARA training: token-focused masking and the alignment loss.
pub fn train_concept(
    model: &ToyDenoiser,
    vocab: &Vocabulary,
    data: &ConceptDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train(model, vocab, data, config, TrainMethod::Tara)
}

/// Unmasked baselines without the alignment loss.
pub fn train_baseline(
    model: &ToyDenoiser,
    vocab: &Vocabulary,
    data: &ConceptDataset,
    config: &TrainConfig,
    mode: TrainMethod,
) -> Result<TrainOutcome> {
    if mode == TrainMethod::Tara {
        return Err(Error::Config("baseline mode must be db-lora or rob".into()));
    }
    train(model, vocab, data, config, mode)
}
