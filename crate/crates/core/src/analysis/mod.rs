//! Diagnostics over sampling probes: per-token adapter influence, aggregated
//! attention with overlap metrics, and interference between compositions.

mod compose;
mod report;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use compose::{compose_check, composed_prompt, ComposeCheck};
pub use report::{write_attention_csv, write_heatmaps, write_influence_csv, write_interference_csv, write_pgm16};

use crate::adapters::Projection;
use crate::diffusion::{Probes, Region};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Fraction of cells in the top-mass set used for IoU.
pub const DEFAULT_TOP_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub adapter: String,
    pub projection: Projection,
    /// Mean over layers (and sampler steps) of the output-column L2 norm,
    /// one value per token position.
    pub magnitudes: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenInfluenceReport {
    pub tokens: Vec<usize>,
    pub entries: Vec<InfluenceEntry>,
}

/// Average adapter output magnitude per token. Adapter outputs do not depend
/// on the latent, so averaging over steps leaves the per-layer mean.
pub fn token_influence(probes: Option<&Probes>) -> Result<TokenInfluenceReport> {
    let probes = probes.ok_or(Error::MissingProbes)?;
    let n = probes.tokens.len();
    let mut acc: BTreeMap<(String, Projection), (Vec<f64>, usize)> = BTreeMap::new();
    let mut order: Vec<(String, Projection)> = Vec::new();
    for rec in &probes.influence {
        if rec.magnitudes.len() != n {
            return Err(Error::Shape {
                op: "token_influence",
                left: (1, rec.magnitudes.len()),
                right: (1, n),
            });
        }
        let key = (rec.adapter.clone(), rec.projection);
        let slot = acc.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (vec![0.0; n], 0)
        });
        for (s, v) in slot.0.iter_mut().zip(&rec.magnitudes) {
            *s += v;
        }
        slot.1 += 1;
    }
    let entries = order
        .into_iter()
        .map(|key| {
            let (sum, count) = &acc[&key];
            InfluenceEntry {
                adapter: key.0,
                projection: key.1,
                magnitudes: sum.iter().map(|s| s / *count as f64).collect(),
            }
        })
        .collect();
    Ok(TokenInfluenceReport {
        tokens: probes.tokens.clone(),
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAttentionSummary {
    pub grid: usize,
    pub positions: Vec<usize>,
    pub top_fraction: f64,
    /// Sampler steps (indices into the probe list) that were averaged.
    pub steps: Range<usize>,
    /// Per position: attention mass over patches, summing to 1.
    pub maps: Vec<Vec<f64>>,
    pub entropy: Vec<f64>,
    /// Per position: the `ceil(top_fraction * m)` heaviest patches, ascending.
    pub top_sets: Vec<Vec<usize>>,
    /// Pairwise IoU of top sets, indexed like `positions`.
    pub iou: Vec<Vec<f64>>,
}

impl TokenAttentionSummary {
    pub fn index_of(&self, position: usize) -> Option<usize> {
        self.positions.iter().position(|&p| p == position)
    }

    /// IoU between a token's top set and a region's cells.
    pub fn region_iou(&self, position: usize, region: &Region) -> Result<f64> {
        let i = self
            .index_of(position)
            .ok_or_else(|| Error::Config(format!("position {position} was not summarized")))?;
        Ok(iou(&self.top_sets[i], &region.cells(self.grid)))
    }
}

/// Intersection over union of two sorted index sets; 1 for two empty sets.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.binary_search(x).is_ok()).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Indices of the `k` largest entries, ties broken by lower index, returned
/// in ascending index order.
pub fn top_set(mass: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..mass.len()).collect();
    idx.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Mean attention per token over layers, heads and the given sampler steps
/// (all steps when `steps` is `None`).
pub fn attention_summary(
    probes: Option<&Probes>,
    positions: &[usize],
    steps: Option<Range<usize>>,
    top_fraction: f64,
) -> Result<TokenAttentionSummary> {
    let probes = probes.ok_or(Error::MissingProbes)?;
    if probes.steps.is_empty() {
        return Err(Error::MissingProbes);
    }
    let steps = steps.unwrap_or(0..probes.steps.len());
    if steps.is_empty() || steps.end > probes.steps.len() {
        return Err(Error::EmptyStepRange);
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Config(format!("top fraction must be in (0, 1], got {top_fraction}")));
    }
    let m = probes.grid * probes.grid;
    let n = probes.tokens.len();
    if let Some(&p) = positions.iter().find(|&&p| p >= n) {
        return Err(Error::Config(format!("token position {p} outside prompt of {n} tokens")));
    }
    let mut sums = vec![vec![0.0; m]; positions.len()];
    for step in &probes.steps[steps.clone()] {
        for map in &step.maps {
            check_map(&map.probs, m, n)?;
            for (k, &pos) in positions.iter().enumerate() {
                for (p, s) in sums[k].iter_mut().enumerate() {
                    *s += map.probs.get(p, pos);
                }
            }
        }
    }
    let maps: Vec<Vec<f64>> = sums
        .into_iter()
        .map(|v| {
            let total: f64 = v.iter().sum();
            if total > 0.0 {
                v.iter().map(|x| x / total).collect()
            } else {
                vec![1.0 / m as f64; m]
            }
        })
        .collect();
    let entropy = maps
        .iter()
        .map(|v| -v.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>())
        .collect();
    let k = ((top_fraction * m as f64).ceil() as usize).clamp(1, m);
    let top_sets: Vec<Vec<usize>> = maps.iter().map(|v| top_set(v, k)).collect();
    let iou_table = top_sets
        .iter()
        .map(|a| top_sets.iter().map(|b| iou(a, b)).collect())
        .collect();
    Ok(TokenAttentionSummary {
        grid: probes.grid,
        positions: positions.to_vec(),
        top_fraction,
        steps,
        maps,
        entropy,
        top_sets,
        iou: iou_table,
    })
}

fn check_map(probs: &Matrix, m: usize, n: usize) -> Result<()> {
    if probs.shape() != (m, n) {
        return Err(Error::Shape {
            op: "attention_probe",
            left: probs.shape(),
            right: (m, n),
        });
    }
    Ok(())
}

/// Mean squared difference of two latents over the rows of `region`.
pub fn region_mse(a: &Matrix, b: &Matrix, region: &Region, grid: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "region_mse",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if !region.fits(grid) || a.rows() != grid * grid {
        return Err(Error::Config(format!("region {region:?} does not fit a {grid}x{grid} latent")));
    }
    let cells = region.cells(grid);
    let mut sum = 0.0;
    for &p in &cells {
        for (x, y) in a.row(p).iter().zip(b.row(p)) {
            sum += (x - y) * (x - y);
        }
    }
    Ok(sum / (cells.len() * a.cols()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferenceEntry {
    pub concept: String,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub method: String,
    pub entries: Vec<InterferenceEntry>,
}

impl InterferenceReport {
    pub fn mean_mse(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.mse).sum::<f64>() / self.entries.len() as f64
    }
}

/// Per-concept region MSE between each solo generation and the composed one.
/// `regions` maps concept names to their template regions.
pub fn interference(
    method: &str,
    solo: &[(String, Matrix)],
    composed: &Matrix,
    regions: &BTreeMap<String, Region>,
    grid: usize,
) -> Result<InterferenceReport> {
    let entries = solo
        .iter()
        .map(|(concept, z)| {
            let region = regions
                .get(concept)
                .ok_or_else(|| Error::RegionUndefined(concept.clone()))?;
            Ok(InterferenceEntry {
                concept: concept.clone(),
                mse: region_mse(z, composed, region, grid)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InterferenceReport {
        method: method.to_string(),
        entries,
    })
}
