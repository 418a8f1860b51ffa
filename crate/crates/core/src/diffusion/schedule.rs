use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Linear beta schedule with cumulative products `alpha_bar[t]`,
/// `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid schedule: T = {steps}, beta {beta_start} -> {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alphas_bar = Vec::with_capacity(steps + 1);
        alphas_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        Ok(NoiseSchedule { betas, alphas_bar })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepOutOfRange { t, max: self.len() });
        }
        Ok(())
    }

    /// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn noise(&self, z0: &Matrix, t: usize, eps: &Matrix) -> Result<Matrix> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        z0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))
    }

    /// Descending timesteps visited by a `steps`-step sampler, starting at `T`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.len();
        if steps == 0 || steps > t_max {
            return Err(Error::Config(format!("sampler steps {steps} must be in 1..={t_max}")));
        }
        Ok((0..steps).map(|i| (steps - i) * t_max / steps).collect())
    }
}
