//! Cross-attention with low-rank adapters on the Key and Value projections.
//!
//! Text tokens are columns: `X` is `d_text x n`, projected keys and values are
//! `d_model x n`. An adapter's contribution is computed only at the columns
//! selected by its [`TokenMask`] and added into exactly those columns, so every
//! other column of a composed projection is bit-for-bit the frozen `W X`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::text::{ConceptBinding, TokenId, TokenSequence};

/// Low-rank update `delta = b * a`, with `a: r x in` and `b: out x r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRank {
    pub a: Matrix,
    pub b: Matrix,
}

impl LowRank {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::Shape {
                op: "low_rank",
                left: b.shape(),
                right: a.shape(),
            });
        }
        Ok(LowRank { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Materialized `b * a`.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("validated at construction")
    }
}

/// Which token columns an adapter may write to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Only the positions of the adapter's own rare token.
    TokenFocused,
    /// Every column (plain LoRA).
    Unmasked,
}

/// Column mask `M` for one adapter over one prompt. The dense form is all
/// ones in `columns` and zeros elsewhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    rare: TokenId,
    columns: Vec<usize>,
    n: usize,
}

impl TokenMask {
    pub fn new(rare: TokenId, columns: Vec<usize>, n: usize) -> Result<Self> {
        if columns.iter().any(|&c| c >= n) {
            return Err(Error::Config(format!("mask column out of range for n = {n}")));
        }
        let mut columns = columns;
        columns.sort_unstable();
        columns.dedup();
        Ok(TokenMask { rare, columns, n })
    }

    /// Mask for `binding` under `policy` on an encoded prompt.
    pub fn for_binding(seq: &TokenSequence, binding: &ConceptBinding, policy: MaskPolicy) -> Self {
        let n = seq.len();
        let columns = match policy {
            MaskPolicy::TokenFocused => seq.positions_of(binding.rare),
            MaskPolicy::Unmasked => (0..n).collect(),
        };
        TokenMask {
            rare: binding.rare,
            columns,
            n,
        }
    }

    pub fn rare(&self) -> TokenId {
        self.rare
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn dense(&self, rows: usize) -> Matrix {
        Matrix::from_fn(rows, self.n, |_, j| {
            if self.columns.binary_search(&j).is_ok() {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Frozen cross-attention weights of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionLayer {
    pub id: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub heads: usize,
}

impl CrossAttentionLayer {
    pub fn new(id: usize, w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix, heads: usize) -> Result<Self> {
        let dm = w_q.rows();
        let square = |m: &Matrix| m.shape() == (dm, dm);
        if !square(&w_q) || !square(&w_o) {
            return Err(Error::Shape {
                op: "cross_attention_layer",
                left: w_q.shape(),
                right: w_o.shape(),
            });
        }
        if w_k.rows() != dm || w_v.shape() != w_k.shape() {
            return Err(Error::Shape {
                op: "cross_attention_layer",
                left: w_k.shape(),
                right: w_v.shape(),
            });
        }
        if heads == 0 || !dm.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide d_model = {dm}"
            )));
        }
        Ok(CrossAttentionLayer {
            id,
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_text(&self) -> usize {
        self.w_k.cols()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = crate::numerics::Fnv::default();
        for m in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            h.write_u64(m.checksum());
        }
        h.finish()
    }
}

/// Row-stochastic `m x n` map of one head: patch -> token attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub probs: Matrix,
}

/// Adapters acting on one layer, borrowed for a forward pass.
#[derive(Clone, Debug, Default)]
pub struct LayerInjections<'a> {
    pub key: Vec<(&'a LowRank, &'a TokenMask)>,
    pub value: Vec<(&'a LowRank, &'a TokenMask)>,
    /// Unmasked Query adapters (baseline mode only).
    pub query: Vec<&'a LowRank>,
    /// Unmasked Output adapters (baseline mode only).
    pub output: Vec<&'a LowRank>,
}

// ---- tape-level building blocks -------------------------------------------

/// One adapter on a tape: factors plus the columns it writes.
#[derive(Clone, Debug)]
pub(crate) struct TapeInjection {
    pub a: Var,
    pub b: Var,
    pub columns: Vec<usize>,
}

/// Adapter vars for one layer.
#[derive(Clone, Debug, Default)]
pub(crate) struct TapeLayerAdapters {
    pub key: Vec<TapeInjection>,
    pub value: Vec<TapeInjection>,
    pub query: Vec<(Var, Var)>,
    pub output: Vec<(Var, Var)>,
}

/// Frozen layer weights on a tape. `*_t` are transposes used for row-form
/// products `h * W^T`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TapeLayer {
    pub w_q_t: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o_t: Var,
    pub heads: usize,
    pub d_model: usize,
}

impl TapeLayer {
    pub fn constants(tape: &mut Tape, layer: &CrossAttentionLayer) -> Self {
        TapeLayer {
            w_q_t: tape.constant(layer.w_q.transpose()),
            w_k: tape.constant(layer.w_k.clone()),
            w_v: tape.constant(layer.w_v.clone()),
            w_o_t: tape.constant(layer.w_o.transpose()),
            heads: layer.heads,
            d_model: layer.d_model(),
        }
    }
}

/// `b * (a * X[:, columns])`, or `None` when the mask is empty.
pub(crate) fn tape_adapter_columns(tape: &mut Tape, inj: &TapeInjection, x: Var) -> Result<Option<Var>> {
    if inj.columns.is_empty() {
        return Ok(None);
    }
    let xs = tape.gather_cols(x, &inj.columns)?;
    let ax = tape.matmul(inj.a, xs)?;
    Ok(Some(tape.matmul(inj.b, ax)?))
}

/// `W X + sum_i M_i (.) (delta_i X)` in registration order.
pub(crate) fn tape_composed_projection(tape: &mut Tape, w: Var, x: Var, adapters: &[TapeInjection]) -> Result<Var> {
    let mut out = tape.matmul(w, x)?;
    for inj in adapters {
        if let Some(delta) = tape_adapter_columns(tape, inj, x)? {
            out = tape.add_cols(out, delta, &inj.columns)?;
        }
    }
    Ok(out)
}

/// Row-form projection `h W^T + sum_i (h a_i^T) b_i^T` for unmasked adapters
/// acting on patches.
fn tape_row_projection(tape: &mut Tape, h: Var, w_t: Var, adapters: &[(Var, Var)]) -> Result<Var> {
    let mut out = tape.matmul(h, w_t)?;
    for &(a, b) in adapters {
        let a_t = tape.transpose(a);
        let b_t = tape.transpose(b);
        let ha = tape.matmul(h, a_t)?;
        let hab = tape.matmul(ha, b_t)?;
        out = tape.add(out, hab)?;
    }
    Ok(out)
}

/// Cross-attention of patches `h` (m x d_model) over tokens `x` (d_text x n).
/// Returns the m x d_model output and one probability map var per head.
pub(crate) fn tape_attention(
    tape: &mut Tape,
    layer: &TapeLayer,
    h: Var,
    x: Var,
    adapters: &TapeLayerAdapters,
) -> Result<(Var, Vec<Var>)> {
    let q = tape_row_projection(tape, h, layer.w_q_t, &adapters.query)?;
    let k = tape_composed_projection(tape, layer.w_k, x, &adapters.key)?;
    let v = tape_composed_projection(tape, layer.w_v, x, &adapters.value)?;
    let (m, dm) = tape.shape(q);
    if dm != layer.d_model || tape.shape(k).0 != dm {
        return Err(Error::Shape {
            op: "attention",
            left: (m, dm),
            right: tape.shape(k),
        });
    }
    let v_t = tape.transpose(v);

    let mut maps = Vec::with_capacity(layer.heads);
    let mixed = if layer.heads == 1 {
        let logits = tape.matmul(q, k)?;
        let scaled = tape.scale(logits, 1.0 / (dm as f64).sqrt());
        let probs = tape.softmax_rows(scaled);
        maps.push(probs);
        tape.matmul(probs, v_t)?
    } else {
        let width = dm / layer.heads;
        let k_t = tape.transpose(k);
        let mut outs = Vec::with_capacity(layer.heads);
        for head in 0..layer.heads {
            let qh = tape.slice_cols(q, head * width, width)?;
            let kh_t = tape.slice_cols(k_t, head * width, width)?;
            let kh = tape.transpose(kh_t);
            let logits = tape.matmul(qh, kh)?;
            let scaled = tape.scale(logits, 1.0 / (width as f64).sqrt());
            let probs = tape.softmax_rows(scaled);
            maps.push(probs);
            let vh = tape.slice_cols(v_t, head * width, width)?;
            outs.push(tape.matmul(probs, vh)?);
        }
        tape.concat_cols(&outs)?
    };
    let out = tape_row_projection(tape, mixed, layer.w_o_t, &adapters.output)?;
    Ok((out, maps))
}

fn check_distinct_rare<'a>(masks: impl Iterator<Item = &'a TokenMask>) -> Result<()> {
    let mut seen: Vec<TokenId> = Vec::new();
    for mask in masks {
        if seen.contains(&mask.rare) {
            return Err(Error::DuplicateRareToken(mask.rare.to_string()));
        }
        seen.push(mask.rare);
    }
    Ok(())
}

fn push_injection(tape: &mut Tape, pair: &LowRank, mask: &TokenMask, x: &Matrix) -> Result<TapeInjection> {
    if mask.n != x.cols() {
        return Err(Error::Shape {
            op: "token_mask",
            left: (0, mask.n),
            right: x.shape(),
        });
    }
    if pair.in_dim() != x.rows() {
        return Err(Error::Shape {
            op: "adapter_input",
            left: pair.a.shape(),
            right: x.shape(),
        });
    }
    Ok(TapeInjection {
        a: tape.constant(pair.a.clone()),
        b: tape.constant(pair.b.clone()),
        columns: mask.columns.clone(),
    })
}

// ---- public value-level operations ----------------------------------------

/// `M (.) (delta X)` for one adapter. Columns outside the mask are exactly
/// zero and are never computed.
pub fn masked_adapter_forward(pair: &LowRank, x: &Matrix, mask: &TokenMask) -> Result<Matrix> {
    let mut tape = Tape::new();
    let inj = push_injection(&mut tape, pair, mask, x)?;
    let xv = tape.constant(x.clone());
    match tape_adapter_columns(&mut tape, &inj, xv)? {
        Some(cols) => {
            let full = tape.scatter_cols(cols, &inj.columns, mask.n)?;
            Ok(tape.value(full).clone())
        }
        None => Ok(Matrix::zeros(pair.out_dim(), x.cols())),
    }
}

/// Frozen projection plus every registered adapter's masked output, summed in
/// the order given. Two adapters bound to the same rare token are rejected.
pub fn composed_projection(w: &Matrix, adapters: &[(&LowRank, &TokenMask)], x: &Matrix) -> Result<Matrix> {
    check_distinct_rare(adapters.iter().map(|(_, m)| *m))?;
    let mut tape = Tape::new();
    let injections = adapters
        .iter()
        .map(|(p, m)| push_injection(&mut tape, p, m, x))
        .collect::<Result<Vec<_>>>()?;
    let wv = tape.constant(w.clone());
    let xv = tape.constant(x.clone());
    let out = tape_composed_projection(&mut tape, wv, xv, &injections)?;
    Ok(tape.value(out).clone())
}

/// One cross-attention layer on latent patches `z` (m x d_model) conditioned
/// on `x` (d_text x n). Returns the layer output and its per-head maps.
pub fn attention_forward(
    layer: &CrossAttentionLayer,
    z: &Matrix,
    x: &Matrix,
    adapters: &LayerInjections<'_>,
) -> Result<(Matrix, Vec<AttentionMap>)> {
    check_distinct_rare(adapters.key.iter().map(|(_, m)| *m))?;
    check_distinct_rare(adapters.value.iter().map(|(_, m)| *m))?;
    let mut tape = Tape::new();
    let tl = TapeLayer::constants(&mut tape, layer);
    let mut ta = TapeLayerAdapters::default();
    for (p, m) in &adapters.key {
        ta.key.push(push_injection(&mut tape, p, m, x)?);
    }
    for (p, m) in &adapters.value {
        ta.value.push(push_injection(&mut tape, p, m, x)?);
    }
    for p in &adapters.query {
        ta.query.push((tape.constant(p.a.clone()), tape.constant(p.b.clone())));
    }
    for p in &adapters.output {
        ta.output.push((tape.constant(p.a.clone()), tape.constant(p.b.clone())));
    }
    let h = tape.constant(z.clone());
    let xv = tape.constant(x.clone());
    let (out, maps) = tape_attention(&mut tape, &tl, h, xv, &ta)?;
    let maps = maps
        .into_iter()
        .enumerate()
        .map(|(head, v)| AttentionMap {
            layer: layer.id,
            head,
            probs: tape.value(v).clone(),
        })
        .collect();
    Ok((tape.value(out).clone(), maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    /// Rank-2 pair whose product is [[1,0],[2,0]].
    fn example_pair() -> LowRank {
        LowRank::new(m(&[&[1.0, 0.0], &[0.0, 0.0]]), m(&[&[1.0, 0.0], &[2.0, 0.0]])).unwrap()
    }

    #[test]
    fn masked_forward_matches_multiply_then_mask() {
        let pair = example_pair();
        let x = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let mask = TokenMask::new(TokenId(5), vec![1], 3).unwrap();
        let out = masked_adapter_forward(&pair, &x, &mask).unwrap();
        assert_eq!(out, m(&[&[0.0, 2.0, 0.0], &[0.0, 4.0, 0.0]]));
    }

    #[test]
    fn empty_and_full_masks() {
        let pair = example_pair();
        let x = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let empty = TokenMask::new(TokenId(5), vec![], 3).unwrap();
        assert_eq!(masked_adapter_forward(&pair, &x, &empty).unwrap(), Matrix::zeros(2, 3));
        let full = TokenMask::new(TokenId(5), vec![0, 1, 2], 3).unwrap();
        let dense = pair.delta().matmul(&x).unwrap();
        assert_eq!(masked_adapter_forward(&pair, &x, &full).unwrap(), dense);
    }

    #[test]
    fn dense_mask_layout() {
        let mask = TokenMask::new(TokenId(2), vec![2, 0], 4).unwrap();
        assert_eq!(
            mask.dense(2),
            m(&[&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 1.0, 0.0]])
        );
    }

    #[test]
    fn composition_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let x = Matrix::gaussian(3, 5, 1.0, &mut rng);
        let base = w.matmul(&x).unwrap();
        assert!(composed_projection(&w, &[], &x).unwrap().bitwise_eq(&base));

        let pair = LowRank::new(Matrix::gaussian(2, 3, 1.0, &mut rng), Matrix::gaussian(4, 2, 1.0, &mut rng)).unwrap();
        let absent = TokenMask::new(TokenId(9), vec![], 5).unwrap();
        assert!(composed_projection(&w, &[(&pair, &absent)], &x).unwrap().bitwise_eq(&base));

        let other = TokenMask::new(TokenId(9), vec![1], 5).unwrap();
        assert!(matches!(
            composed_projection(&w, &[(&pair, &other), (&pair, &absent)], &x),
            Err(Error::DuplicateRareToken(_))
        ));
    }

    #[test]
    fn disjoint_adapters_touch_only_their_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let x = Matrix::gaussian(3, 6, 1.0, &mut rng);
        let p1 = LowRank::new(Matrix::gaussian(2, 3, 1.0, &mut rng), Matrix::gaussian(4, 2, 1.0, &mut rng)).unwrap();
        let p2 = LowRank::new(Matrix::gaussian(2, 3, 1.0, &mut rng), Matrix::gaussian(4, 2, 1.0, &mut rng)).unwrap();
        let m1 = TokenMask::new(TokenId(7), vec![2], 6).unwrap();
        let m2 = TokenMask::new(TokenId(8), vec![4], 6).unwrap();
        let out = composed_projection(&w, &[(&p1, &m1), (&p2, &m2)], &x).unwrap();
        let base = w.matmul(&x).unwrap();
        for j in 0..6 {
            let xj = Matrix::column(&x.col(j));
            let expect = match j {
                2 => w.add(&p1.delta()).unwrap().matmul(&xj).unwrap(),
                4 => w.add(&p2.delta()).unwrap().matmul(&xj).unwrap(),
                _ => Matrix::column(&base.col(j)),
            };
            let got = Matrix::column(&out.col(j));
            if j == 2 || j == 4 {
                assert!(got.sub(&expect).unwrap().max_abs() < 1e-12);
            } else {
                assert!(got.bitwise_eq(&expect), "column {j} moved");
            }
        }
    }

    fn random_layer(rng: &mut ChaCha8Rng, dm: usize, dt: usize, heads: usize) -> CrossAttentionLayer {
        let s = 1.0 / (dm as f64).sqrt();
        CrossAttentionLayer::new(
            0,
            Matrix::gaussian(dm, dm, s, rng),
            Matrix::gaussian(dm, dt, s, rng),
            Matrix::gaussian(dm, dt, s, rng),
            Matrix::gaussian(dm, dm, s, rng),
            heads,
        )
        .unwrap()
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut layer = random_layer(&mut rng, 4, 3, 1);
        layer.w_q = Matrix::zeros(4, 4);
        let z = Matrix::gaussian(5, 4, 1.0, &mut rng);
        let x = Matrix::gaussian(3, 4, 1.0, &mut rng);
        let (out, maps) = attention_forward(&layer, &z, &x, &LayerInjections::default()).unwrap();
        assert!(maps[0].probs.data().iter().all(|p| (*p - 0.25).abs() < 1e-15));
        // Every patch receives W_O * mean_j(W_V x_j).
        let v = layer.w_v.matmul(&x).unwrap();
        let mean: Vec<f64> = (0..4).map(|i| v.row(i).iter().sum::<f64>() / 4.0).collect();
        let expect = layer.w_o.matmul(&Matrix::column(&mean)).unwrap();
        for p in 0..5 {
            for i in 0..4 {
                assert!((out.get(p, i) - expect.get(i, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attention_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let layer = random_layer(&mut rng, 4, 3, 1);
        let z = Matrix::gaussian(6, 4, 1.0, &mut rng);
        let x = Matrix::gaussian(3, 1, 1.0, &mut rng);
        let (_, maps) = attention_forward(&layer, &z, &x, &LayerInjections::default()).unwrap();
        assert!(maps[0].probs.data().iter().all(|p| *p == 1.0));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let l = random_layer(&mut rng, 4, 3, 1);
        assert!(CrossAttentionLayer::new(0, l.w_q, l.w_k, l.w_v, l.w_o, 3).is_err());
    }

    #[test]
    fn multi_head_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let layer = random_layer(&mut rng, 8, 5, 2);
        let z = Matrix::gaussian(4, 8, 1.0, &mut rng);
        let x = Matrix::gaussian(5, 3, 1.0, &mut rng);
        let (out, maps) = attention_forward(&layer, &z, &x, &LayerInjections::default()).unwrap();
        assert_eq!(out.shape(), (4, 8));
        assert_eq!(maps.len(), 2);
        for map in &maps {
            for i in 0..4 {
                let s: f64 = map.probs.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
