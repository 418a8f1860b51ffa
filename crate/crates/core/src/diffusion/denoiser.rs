//! Miniature noise predictor built from cross-attention blocks.
//!
//! Latents are `m x d_model` (one row per patch of a `g x g` grid). Each block
//! is cross-attention over the prompt followed by a tanh MLP, both residual.
//! The blocks' summed residual updates form a content estimate `x_hat`, and the
//! noise prediction is the Gaussian-posterior form
//!
//! ```text
//! eps_hat = k_t (z_t - sqrt(abar_t) x_hat),   k_t = sqrt(1 - abar_t) / (abar_t s^2 + 1 - abar_t)
//! ```
//!
//! with `s` the configured prior scale. With `x_hat = 0` this is the exact
//! posterior mean of the noise for data `N(0, s^2)`, so an empty scene is
//! already denoised well and adapters only have to supply concept content.
//!
//! Base weights are synthesized, not trained: each class word gets a key that
//! the queries of its home region match, and BOS gets a key matched by every
//! patch (an attention sink). This stands in for the spatial prior a
//! pretrained text-to-image model has for class nouns.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::attention::{tape_attention, CrossAttentionLayer, TapeLayer, TapeLayerAdapters};
use crate::error::{Error, Result};
use crate::numerics::{random_orthonormal_rows, Fnv, Matrix, Tape, Var};
use crate::text::{TokenId, Vocabulary};

/// Axis-aligned block of patches on the latent grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    /// Quadrant `q` (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
    pub fn quadrant(grid: usize, q: usize) -> Region {
        let half = grid / 2;
        Region {
            row: (q / 2 % 2) * half,
            col: (q % 2) * half,
            height: half,
            width: half,
        }
    }

    pub fn fits(&self, grid: usize) -> bool {
        self.height > 0 && self.width > 0 && self.row + self.height <= grid && self.col + self.width <= grid
    }

    pub fn contains(&self, grid: usize, patch: usize) -> bool {
        let (r, c) = (patch / grid, patch % grid);
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }

    /// Patch indices (row-major) inside the region.
    pub fn cells(&self, grid: usize) -> Vec<usize> {
        (0..grid * grid).filter(|&p| self.contains(grid, p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Patch grid side `g`; `m = g^2`.
    pub grid: usize,
    pub d_model: usize,
    pub d_text: usize,
    /// Number of cross-attention blocks `L`.
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Prior scale `s` in the noise-prediction head.
    pub prior_std: f64,
    /// Norm of the region code in each patch's positional embedding.
    pub region_gain: f64,
    /// Scale of the class-token keys matched by region codes.
    pub anchor_gain: f64,
    /// Norm of the shared sink code in every positional embedding.
    pub sink_gain: f64,
    /// Scale of the BOS key matched by the sink code.
    pub sink_anchor_gain: f64,
    /// Standard deviation of per-patch positional jitter.
    pub position_jitter: f64,
    /// Scale of the random part of W_K.
    pub key_scale: f64,
    /// Scale of W_V; small so the base model writes little content.
    pub value_scale: f64,
    /// Scale of the MLP output weights.
    pub mlp_scale: f64,
    /// Amplitude of the sinusoidal timestep embedding.
    pub time_scale: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            grid: 8,
            d_model: 32,
            d_text: 32,
            layers: 4,
            heads: 1,
            mlp_hidden: 32,
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            prior_std: 0.1,
            region_gain: 6.0,
            anchor_gain: 6.0,
            sink_gain: 3.0,
            sink_anchor_gain: 8.0,
            position_jitter: 0.1,
            key_scale: 1.0,
            value_scale: 0.05,
            mlp_scale: 0.02,
            time_scale: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.grid < 2 || self.d_model < 2 || self.d_text < 4 || self.layers == 0 || self.mlp_hidden == 0 {
            return bad(format!("degenerate model dimensions {self:?}"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide d_model = {}", self.heads, self.d_model));
        }
        if self.prior_std <= 0.0 {
            return bad("prior_std must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attention: CrossAttentionLayer,
    /// hidden x d_model
    pub mlp_in: Matrix,
    /// d_model x hidden
    pub mlp_out: Matrix,
}

#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    /// m x d_model
    positions: Matrix,
    blocks: Vec<Block>,
}

/// Result of one forward pass on a tape.
pub(crate) struct TapeForward {
    pub eps: Var,
    /// Per layer, one probability map per head.
    pub maps: Vec<Vec<Var>>,
}

impl ToyDenoiser {
    /// Synthesizes frozen weights. `anchors` pairs class tokens with the grid
    /// region their keys should attract.
    pub fn new(config: DenoiserConfig, vocab: &Vocabulary, anchors: &[(TokenId, Region)], seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.d() != config.d_text {
            return Err(Error::Config(format!(
                "vocabulary width {} differs from d_text {}",
                vocab.d(),
                config.d_text
            )));
        }
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?;
        let (g, dm, dt) = (config.grid, config.d_model, config.d_text);
        let m = g * g;

        let mut regions: Vec<Region> = Vec::new();
        for (tok, r) in anchors {
            if !r.fits(g) {
                return Err(Error::Config(format!("region {r:?} of token {tok} is off the grid")));
            }
            if !regions.contains(r) {
                regions.push(*r);
            }
        }
        if regions.len() + 1 > dm {
            return Err(Error::Config("too many anchor regions for d_model".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Orthonormal codes: one per region, plus the sink code last.
        let codes = random_orthonormal_rows(regions.len() + 1, dm, &mut rng)?;
        let sink = codes.row(regions.len()).to_vec();
        let jitter = Matrix::gaussian(m, dm, config.position_jitter, &mut rng);
        let positions = Matrix::from_fn(m, dm, |p, i| {
            let mut v = config.sink_gain * sink[i] + jitter.get(p, i);
            for (ri, r) in regions.iter().enumerate() {
                if r.contains(g, p) {
                    v += config.region_gain * codes.get(ri, i);
                }
            }
            v
        });

        // Anchored tokens: classes and BOS. Their key targets are exact via the
        // minimum-norm solution over the anchored embeddings.
        let mut anchor_tokens: Vec<TokenId> = anchors.iter().map(|(t, _)| *t).collect();
        anchor_tokens.push(TokenId::BOS);
        let emb = Matrix::from_fn(dt, anchor_tokens.len(), |i, j| vocab.embedding(anchor_tokens[j])[i]);
        let gram = emb.transpose().matmul(&emb)?;

        let mut blocks = Vec::with_capacity(config.layers);
        for id in 0..config.layers {
            let w_q = random_orthonormal_rows(dm, dm, &mut rng)?;
            // Key direction that a patch carrying code c matches: W_Q c.
            let matched = |code: &[f64]| -> Result<Matrix> { w_q.matmul(&Matrix::column(code)) };
            let mut targets = Matrix::zeros(dm, anchor_tokens.len());
            let mut target_cols = Vec::with_capacity(anchor_tokens.len());
            for (tok, r) in anchors {
                let ri = regions.iter().position(|x| x == r).expect("collected above");
                let col = matched(codes.row(ri))?.scale(config.anchor_gain);
                let _ = tok;
                target_cols.push(col);
            }
            target_cols.push(matched(&sink)?.scale(config.sink_anchor_gain));
            for (j, col) in target_cols.iter().enumerate() {
                for i in 0..dm {
                    targets = targets.with_entry(i, j, col.get(i, 0));
                }
            }
            let w_rand = Matrix::gaussian(dm, dt, config.key_scale / (dt as f64).sqrt(), &mut rng);
            // Solve W_K emb = targets with W_K = w_rand + C emb^T.
            let residual = targets.sub(&w_rand.matmul(&emb)?)?;
            let coeff = gram.solve(&residual.transpose())?.transpose();
            let w_k = w_rand.add(&coeff.matmul(&emb.transpose())?)?;

            let w_v = Matrix::gaussian(dm, dt, config.value_scale / (dt as f64).sqrt(), &mut rng);
            let w_o = random_orthonormal_rows(dm, dm, &mut rng)?;
            let attention = CrossAttentionLayer::new(id, w_q, w_k, w_v, w_o, config.heads)?;
            let mlp_in = Matrix::gaussian(config.mlp_hidden, dm, 1.0 / (dm as f64).sqrt(), &mut rng);
            let mlp_out = Matrix::gaussian(dm, config.mlp_hidden, config.mlp_scale / (config.mlp_hidden as f64).sqrt(), &mut rng);
            blocks.push(Block {
                attention,
                mlp_in,
                mlp_out,
            });
        }
        Ok(ToyDenoiser {
            config,
            schedule,
            positions,
            blocks,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn patches(&self) -> usize {
        self.config.patches()
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (self.patches(), self.config.d_model)
    }

    pub fn positions(&self) -> &Matrix {
        &self.positions
    }

    /// Sinusoidal embedding of `t`, width d_model.
    pub fn time_embedding(&self, t: usize) -> Vec<f64> {
        let dm = self.config.d_model;
        let half = dm / 2;
        let mut out = vec![0.0; dm];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out[2 * i] = self.config.time_scale * (t as f64 * freq).sin();
            out[2 * i + 1] = self.config.time_scale * (t as f64 * freq).cos();
        }
        out
    }

    /// `(k_t, k_t * sqrt(abar_t))` of the noise-prediction head.
    pub fn head_gains(&self, t: usize) -> (f64, f64) {
        let ab = self.schedule.alpha_bar(t);
        let s2 = self.config.prior_std * self.config.prior_std;
        let k = (1.0 - ab).sqrt() / (ab * s2 + 1.0 - ab);
        (k, k * ab.sqrt())
    }

    /// Checksum over every frozen weight.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        h.write_u64(self.positions.checksum());
        for b in &self.blocks {
            h.write_u64(b.attention.checksum());
            h.write_u64(b.mlp_in.checksum());
            h.write_u64(b.mlp_out.checksum());
        }
        h.finish()
    }

    fn check_latent(&self, z: &Matrix) -> Result<()> {
        if z.shape() != self.latent_shape() {
            return Err(Error::Shape {
                op: "denoiser_input",
                left: z.shape(),
                right: self.latent_shape(),
            });
        }
        Ok(())
    }

    /// Forward pass recording on `tape`. `adapters` holds one entry per layer
    /// (or is empty for the base model).
    pub(crate) fn forward_tape(
        &self,
        tape: &mut Tape,
        z: &Matrix,
        t: usize,
        x: Var,
        adapters: &[TapeLayerAdapters],
    ) -> Result<TapeForward> {
        self.check_latent(z)?;
        self.schedule.check(t)?;
        if tape.shape(x).0 != self.config.d_text {
            return Err(Error::Shape {
                op: "denoiser_text",
                left: tape.shape(x),
                right: (self.config.d_text, 0),
            });
        }
        if !adapters.is_empty() && adapters.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "adapters cover {} layers, model has {}",
                adapters.len(),
                self.blocks.len()
            )));
        }
        let temb = self.time_embedding(t);
        let input = Matrix::from_fn(z.rows(), z.cols(), |p, i| z.get(p, i) + self.positions.get(p, i) + temb[i]);
        let h0 = tape.constant(input);
        let mut h = h0;
        let empty = TapeLayerAdapters::default();
        let mut maps = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let layer = TapeLayer::constants(tape, &block.attention);
            let ad = adapters.get(l).unwrap_or(&empty);
            let (att, probs) = tape_attention(tape, &layer, h, x, ad)?;
            maps.push(probs);
            h = tape.add(h, att)?;
            let w_in_t = tape.constant(block.mlp_in.transpose());
            let w_out_t = tape.constant(block.mlp_out.transpose());
            let pre = tape.matmul(h, w_in_t)?;
            let act = tape.tanh(pre);
            let mlp = tape.matmul(act, w_out_t)?;
            h = tape.add(h, mlp)?;
        }
        let x_hat = tape.sub(h, h0)?;
        let (k, k_content) = self.head_gains(t);
        let scaled_z = tape.constant(z.scale(k));
        let content = tape.scale(x_hat, k_content);
        let eps = tape.sub(scaled_z, content)?;
        Ok(TapeForward { eps, maps })
    }
}
