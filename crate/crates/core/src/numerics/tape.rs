//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Leaves
//! created with [`Tape::leaf`] receive gradients; constants do not, and any
//! node computed only from constants is skipped during the backward sweep.
//! Tapes are rebuilt for each training step.

use std::collections::BTreeMap;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    GatherCols(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    AddCols(Var, Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    MeanSquare(Var),
    AbsSum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Deliberate adjoint corruption used as a negative control for gradient
/// checks.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Multiplies the left-operand adjoint of every matmul by this factor.
    MatMulLeftAdjoint(f64),
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients of a scalar loss with respect to every leaf on the tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Matrix>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Matrix> {
        self.by_leaf.get(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Matrix)> {
        self.by_leaf.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Parameter that receives a gradient.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen value; never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Selected columns, in order.
    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_cols(cols)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherCols(a, cols.to_vec()), rg))
    }

    /// Places the k-th column of `a` at column `cols[k]` of an otherwise zero
    /// `rows x n` matrix.
    pub fn scatter_cols(&mut self, a: Var, cols: &[usize], n: usize) -> Result<Var> {
        let src = self.value(a);
        if src.cols() != cols.len() || cols.iter().any(|&c| c >= n) {
            return Err(Error::Shape {
                op: "scatter_cols",
                left: src.shape(),
                right: (cols.len(), n),
            });
        }
        let mut value = vec![0.0; src.rows() * n];
        for (k, &c) in cols.iter().enumerate() {
            for i in 0..src.rows() {
                value[i * n + c] = src.get(i, k);
            }
        }
        let value = Matrix::from_vec(src.rows(), n, value)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::ScatterCols(a, cols.to_vec()), rg))
    }

    /// Copy of `base` with the k-th column of `delta` added into column
    /// `cols[k]`. Columns not listed are copied bit for bit.
    pub fn add_cols(&mut self, base: Var, delta: Var, cols: &[usize]) -> Result<Var> {
        let b = self.value(base);
        let d = self.value(delta);
        if b.rows() != d.rows() || d.cols() != cols.len() || cols.iter().any(|&c| c >= b.cols()) {
            return Err(Error::Shape {
                op: "add_cols",
                left: b.shape(),
                right: d.shape(),
            });
        }
        let n = b.cols();
        let mut value = b.data().to_vec();
        for (k, &c) in cols.iter().enumerate() {
            for i in 0..b.rows() {
                value[i * n + c] += d.get(i, k);
            }
        }
        let value = Matrix::from_vec(b.rows(), n, value)?;
        let rg = self.rg(&[base, delta]);
        Ok(self.push(value, Op::AddCols(base, delta, cols.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: (rows, 0),
                    right: self.value(*p).shape(),
                });
            }
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Matrix::from_vec(rows, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean of squared entries.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Matrix::scalar(v.data().iter().map(|x| x * x).sum::<f64>() / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanSquare(a), rg)
    }

    /// L1 norm of all entries. The adjoint at exact zeros is 0.
    pub fn abs_sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).abs_sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::AbsSum(a), rg)
    }

    /// Reverse sweep from a scalar `loss`. Returns a gradient for every leaf,
    /// zero where the loss does not depend on it.
    pub fn grad(&self, loss: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar { rows, cols });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut adj)?;
        }

        let mut by_leaf = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let g = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                by_leaf.insert(Var(i), g);
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        adj[v.0] = Some(match adj[v.0].take() {
            Some(prev) => prev.add(&g)?,
            None => g,
        });
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.scale(-1.0))?;
            }
            Op::Hadamard(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(adj, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(adj, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, g.scale(*s))?,
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let mut ga = g.matmul(&self.value(*b).transpose())?;
                    if let Some(Fault::MatMulLeftAdjoint(f)) = self.fault {
                        ga = ga.scale(f);
                    }
                    self.accumulate(adj, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(adj, *b, gb)?;
                }
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose())?,
            Op::Tanh(a) => {
                let y = &node.value;
                let ga = Matrix::from_fn(y.rows(), y.cols(), |i, j| {
                    let t = y.get(i, j);
                    (1.0 - t * t) * g.get(i, j)
                });
                self.accumulate(adj, *a, ga)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = vec![0.0; y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..y.cols() {
                        ga[i * y.cols() + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(adj, *a, Matrix::from_vec(y.rows(), y.cols(), ga)?)?;
            }
            Op::GatherCols(a, cols) => {
                let src = self.value(*a);
                let mut ga = vec![0.0; src.len()];
                for (k, &c) in cols.iter().enumerate() {
                    for i in 0..src.rows() {
                        ga[i * src.cols() + c] += g.get(i, k);
                    }
                }
                self.accumulate(adj, *a, Matrix::from_vec(src.rows(), src.cols(), ga)?)?;
            }
            Op::ScatterCols(a, cols) => self.accumulate(adj, *a, g.gather_cols(cols)?)?,
            Op::AddCols(base, delta, cols) => {
                self.accumulate(adj, *base, g.clone())?;
                if self.requires_grad(*delta) {
                    self.accumulate(adj, *delta, g.gather_cols(cols)?)?;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut ga = vec![0.0; src.len()];
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga[i * src.cols() + start + j] = g.get(i, j);
                    }
                }
                self.accumulate(adj, *a, Matrix::from_vec(src.rows(), src.cols(), ga)?)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        self.accumulate(adj, *p, g.slice_cols(start, w)?)?;
                    }
                    start += w;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                let s = g.item()?;
                self.accumulate(adj, *a, Matrix::from_fn(r, c, |_, _| s))?;
            }
            Op::MeanSquare(a) => {
                let x = self.value(*a);
                let s = 2.0 * g.item()? / x.len() as f64;
                self.accumulate(adj, *a, x.scale(s))?;
            }
            Op::AbsSum(a) => {
                let s = g.item()?;
                let x = self.value(*a);
                self.accumulate(adj, *a, x.map(|v| s * sign(v)))?;
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
