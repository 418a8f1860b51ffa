//! LoRA adapters bound to a rare token, and the registry that composes them.

mod io;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::io::{decode_adapter, encode_adapter, load_adapter, save_adapter, ADAPTER_MAGIC, ADAPTER_VERSION};
use crate::attention::{LayerInjections, LowRank, MaskPolicy, TokenMask};
use crate::error::{Error, Result};
use crate::numerics::{random_orthonormal_rows, Fnv, Matrix};
use crate::text::{ConceptBinding, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// `A ~ N(0, 1/r)`, `B = 0`.
    Gaussian,
    /// `A` with random orthonormal rows, frozen; `B = 0`.
    Rob,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterTargets {
    /// Key and Value projections of every cross-attention layer.
    KeyValue,
    /// Query, Key, Value and Output projections (unmasked baselines only).
    AllProjections,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAdapter {
    pub layer: usize,
    pub key: LowRank,
    pub value: LowRank,
    pub query: Option<LowRank>,
    pub output: Option<LowRank>,
}

impl LayerAdapter {
    pub fn get(&self, p: Projection) -> Option<&LowRank> {
        match p {
            Projection::Key => Some(&self.key),
            Projection::Value => Some(&self.value),
            Projection::Query => self.query.as_ref(),
            Projection::Output => self.output.as_ref(),
        }
    }

    fn get_mut(&mut self, p: Projection) -> Option<&mut LowRank> {
        match p {
            Projection::Key => Some(&mut self.key),
            Projection::Value => Some(&mut self.value),
            Projection::Query => self.query.as_mut(),
            Projection::Output => self.output.as_mut(),
        }
    }
}

/// Dimensions shared by every layer of an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterShape {
    pub rank: usize,
    pub d_model: usize,
    pub d_text: usize,
    pub layers: usize,
    pub targets: AdapterTargets,
}

/// Identifies one trainable factor: layer, projection, and `a` or `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactorId {
    pub layer: usize,
    pub projection: Projection,
    pub is_a: bool,
}

impl FactorId {
    pub fn name(&self) -> String {
        format!(
            "l{}.{}.{}",
            self.layer,
            self.projection.as_str(),
            if self.is_a { "a" } else { "b" }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub concept: ConceptBinding,
    pub rank: usize,
    pub d_model: usize,
    pub d_text: usize,
    pub layers: Vec<LayerAdapter>,
    pub mask_policy: MaskPolicy,
    pub init_mode: InitMode,
    pub targets: AdapterTargets,
}

/// Creates an adapter with `B = 0`, so it has no effect until trained.
pub fn init_adapter(
    concept: ConceptBinding,
    shape: AdapterShape,
    mode: InitMode,
    policy: MaskPolicy,
    seed: u64,
) -> Result<LoraAdapter> {
    let limit = shape.d_model.min(shape.d_text);
    if shape.rank == 0 {
        return Err(Error::Config("adapter rank must be >= 1".into()));
    }
    if shape.rank > limit {
        return Err(Error::RankTooLarge {
            rank: shape.rank,
            limit,
        });
    }
    if shape.targets == AdapterTargets::AllProjections && policy == MaskPolicy::TokenFocused {
        return Err(Error::Config(
            "token-focused adapters act on Key/Value only".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = shape.rank;
    let mut draw_a = |cols: usize| -> Result<Matrix> {
        match mode {
            InitMode::Gaussian => Ok(Matrix::gaussian(r, cols, 1.0 / (r as f64).sqrt(), &mut rng)),
            InitMode::Rob => random_orthonormal_rows(r, cols, &mut rng),
        }
    };
    let mut layers = Vec::with_capacity(shape.layers);
    for layer in 0..shape.layers {
        let key = LowRank::new(draw_a(shape.d_text)?, Matrix::zeros(shape.d_model, r))?;
        let value = LowRank::new(draw_a(shape.d_text)?, Matrix::zeros(shape.d_model, r))?;
        let (query, output) = match shape.targets {
            AdapterTargets::KeyValue => (None, None),
            AdapterTargets::AllProjections => (
                Some(LowRank::new(draw_a(shape.d_model)?, Matrix::zeros(shape.d_model, r))?),
                Some(LowRank::new(draw_a(shape.d_model)?, Matrix::zeros(shape.d_model, r))?),
            ),
        };
        layers.push(LayerAdapter {
            layer,
            key,
            value,
            query,
            output,
        });
    }
    Ok(LoraAdapter {
        concept,
        rank: r,
        d_model: shape.d_model,
        d_text: shape.d_text,
        layers,
        mask_policy: policy,
        init_mode: mode,
        targets: shape.targets,
    })
}

impl LoraAdapter {
    pub fn shape(&self) -> AdapterShape {
        AdapterShape {
            rank: self.rank,
            d_model: self.d_model,
            d_text: self.d_text,
            layers: self.layers.len(),
            targets: self.targets,
        }
    }

    /// `A` factors are frozen for orthogonal-basis adapters.
    pub fn a_frozen(&self) -> bool {
        self.init_mode == InitMode::Rob
    }

    pub fn projections(&self) -> &'static [Projection] {
        match self.targets {
            AdapterTargets::KeyValue => &[Projection::Key, Projection::Value],
            AdapterTargets::AllProjections => &[
                Projection::Key,
                Projection::Value,
                Projection::Query,
                Projection::Output,
            ],
        }
    }

    /// Every factor in serialization order.
    pub fn factors(&self) -> Vec<(FactorId, &Matrix)> {
        let mut out = Vec::new();
        for la in &self.layers {
            for &p in self.projections() {
                let pair = la.get(p).expect("projection present for targets");
                out.push((FactorId { layer: la.layer, projection: p, is_a: true }, &pair.a));
                out.push((FactorId { layer: la.layer, projection: p, is_a: false }, &pair.b));
            }
        }
        out
    }

    pub fn factor_mut(&mut self, id: FactorId) -> Option<&mut Matrix> {
        let la = self.layers.iter_mut().find(|l| l.layer == id.layer)?;
        let pair = la.get_mut(id.projection)?;
        Some(if id.is_a { &mut pair.a } else { &mut pair.b })
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerAdapter> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn mask(&self, seq: &TokenSequence) -> TokenMask {
        TokenMask::for_binding(seq, &self.concept, self.mask_policy)
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for (_, m) in self.factors() {
            h.write_u64(m.checksum());
        }
        h.finish()
    }

    pub fn bitwise_eq(&self, other: &LoraAdapter) -> bool {
        let (a, b) = (self.factors(), other.factors());
        self.concept == other.concept
            && self.shape() == other.shape()
            && self.mask_policy == other.mask_policy
            && self.init_mode == other.init_mode
            && a.len() == b.len()
            && a.iter().zip(&b).all(|((ia, ma), (ib, mb))| ia == ib && ma.bitwise_eq(mb))
    }
}

/// Ordered set of adapters composed at inference time.
#[derive(Clone, Debug, Default)]
pub struct AdapterRegistry {
    adapters: Vec<LoraAdapter>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        AdapterRegistry::default()
    }

    pub fn from_adapters(adapters: impl IntoIterator<Item = LoraAdapter>) -> Result<Self> {
        let mut reg = AdapterRegistry::new();
        for a in adapters {
            reg.register(a)?;
        }
        Ok(reg)
    }

    /// Appends `adapter`. Rejects a rare token that is already registered and
    /// adapters whose dimensions disagree with those already present.
    pub fn register(&mut self, adapter: LoraAdapter) -> Result<()> {
        if self.adapters.iter().any(|a| a.concept.rare == adapter.concept.rare) {
            return Err(Error::DuplicateRareToken(adapter.concept.rare.to_string()));
        }
        if let Some(first) = self.adapters.first() {
            if (first.d_model, first.d_text, first.layers.len())
                != (adapter.d_model, adapter.d_text, adapter.layers.len())
            {
                return Err(Error::Config(format!(
                    "adapter `{}` does not match the registered model dimensions",
                    adapter.concept.name
                )));
            }
        }
        self.adapters.push(adapter);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    /// Masks of every adapter against `seq`, in registration order.
    pub fn masks(&self, seq: &TokenSequence) -> Vec<TokenMask> {
        self.adapters.iter().map(|a| a.mask(seq)).collect()
    }

    /// Borrowed injections for one layer; `masks` must come from [`Self::masks`].
    pub fn layer_injections<'a>(&'a self, layer: usize, masks: &'a [TokenMask]) -> LayerInjections<'a> {
        let mut inj = LayerInjections::default();
        for (adapter, mask) in self.adapters.iter().zip(masks) {
            let Some(la) = adapter.layer(layer) else { continue };
            inj.key.push((&la.key, mask));
            inj.value.push((&la.value, mask));
            if let Some(q) = &la.query {
                inj.query.push(q);
            }
            if let Some(o) = &la.output {
                inj.output.push(o);
            }
        }
        inj
    }
}

/// JSON manifest listing adapter files in composition order. Relative paths
/// resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub adapters: Vec<PathBuf>,
}

impl RegistryManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_registry(path: &Path) -> Result<AdapterRegistry> {
        let manifest = RegistryManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let adapters = manifest
            .adapters
            .iter()
            .map(|p| load_adapter(&base.join(p)))
            .collect::<Result<Vec<_>>>()?;
        AdapterRegistry::from_adapters(adapters)
    }
}
