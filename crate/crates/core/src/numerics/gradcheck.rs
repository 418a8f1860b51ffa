//! Central-difference verification of tape gradients.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::Result;

/// A named parameter block handed to [`fd_check`].
#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub name: String,
    pub value: Matrix,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        ParamBlock {
            name: name.into(),
            value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockStatus {
    Checked,
    /// Function value was not finite at a perturbed point; the block was
    /// abandoned at this entry.
    NonFinite { entry: usize },
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub entries: usize,
    /// ||analytic - numeric|| / max(||analytic||, ||numeric||), 0 when both vanish.
    pub rel_error: f64,
    pub max_abs_error: f64,
    /// ||analytic - numeric||.
    pub abs_error: f64,
    /// Size of ||analytic - numeric|| that rounding in the loss evaluations
    /// alone can produce.
    pub roundoff: f64,
    pub status: BlockStatus,
}

impl BlockReport {
    /// Within `tolerance` relative error, or a discrepancy no larger than
    /// rounding noise (blocks whose gradient is itself near the noise floor).
    pub fn passes(&self, tolerance: f64) -> bool {
        self.status == BlockStatus::Checked && (self.rel_error < tolerance || self.abs_error <= self.roundoff)
    }
}

/// Multiple of `eps * |f| / h` treated as rounding noise per entry.
const ROUNDOFF_FACTOR: f64 = 100.0;

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub blocks: Vec<BlockReport>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| match b.status {
                BlockStatus::Checked => b.rel_error,
                BlockStatus::NonFinite { .. } => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&BlockReport> {
        self.blocks.iter().max_by(|a, b| {
            let ea = if a.status == BlockStatus::Checked { a.rel_error } else { f64::INFINITY };
            let eb = if b.status == BlockStatus::Checked { b.rel_error } else { f64::INFINITY };
            ea.total_cmp(&eb)
        })
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.blocks.iter().all(|b| b.passes(tolerance))
    }
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` builds a scalar loss on the tape from one variable per parameter
/// block. Each entry is perturbed by `step * max(1, |w|)`.
pub fn fd_check<F>(f: F, params: &[ParamBlock], step: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");

    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.grad(loss)?;

    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut current: Vec<Matrix> = params.iter().map(|p| p.value.clone()).collect();
    let mut report = FdReport::default();
    for (b, (block, leaf)) in params.iter().zip(&leaves).enumerate() {
        let analytic = grads.get(*leaf).expect("leaf gradient");
        let mut numeric = Vec::with_capacity(block.value.len());
        let mut noise2 = 0.0;
        let mut status = BlockStatus::Checked;
        let cols = block.value.cols();
        for e in 0..block.value.len() {
            let (i, j) = (e / cols, e % cols);
            let w = block.value.get(i, j);
            let h = step * w.abs().max(1.0);
            current[b] = block.value.with_entry(i, j, w + h);
            let plus = eval(&current)?;
            current[b] = block.value.with_entry(i, j, w - h);
            let minus = eval(&current)?;
            current[b] = block.value.clone();
            if !plus.is_finite() || !minus.is_finite() {
                status = BlockStatus::NonFinite { entry: e };
                break;
            }
            numeric.push((plus - minus) / (2.0 * h));
            let noise = ROUNDOFF_FACTOR * f64::EPSILON * plus.abs().max(minus.abs()) / h;
            noise2 += noise * noise;
        }

        let (rel_error, max_abs_error, abs_error) = if status == BlockStatus::Checked {
            let mut diff2 = 0.0;
            let mut an2 = 0.0;
            let mut nu2 = 0.0;
            let mut max_abs: f64 = 0.0;
            for (a, n) in analytic.data().iter().zip(&numeric) {
                diff2 += (a - n) * (a - n);
                an2 += a * a;
                nu2 += n * n;
                max_abs = max_abs.max((a - n).abs());
            }
            let denom = an2.sqrt().max(nu2.sqrt());
            let rel = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
            (rel, max_abs, diff2.sqrt())
        } else {
            (f64::INFINITY, f64::INFINITY, f64::INFINITY)
        };
        report.blocks.push(BlockReport {
            name: block.name.clone(),
            entries: block.value.len(),
            rel_error,
            max_abs_error,
            abs_error,
            roundoff: noise2.sqrt(),
            status,
        });
    }
    Ok(report)
}
