use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
///
/// Values are immutable once built; every operation returns a fresh matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Column vector (n x 1).
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Scalar value of a 1x1 matrix.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(self.data[0])
    }

    /// Copy with entry (i, j) replaced.
    pub fn with_entry(&self, i: usize, j: usize, value: f64) -> Matrix {
        let mut out = self.clone();
        out.data[i * self.cols + j] = value;
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.data[i * self.cols + j]);
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Matrix {
        let mut data = self.data.clone();
        if self.cols == 0 {
            return self.clone();
        }
        for row in data.chunks_mut(self.cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Columns `cols` (in the given order) as a new rows x cols.len() matrix.
    pub fn gather_cols(&self, cols: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.cols) {
            return Err(Error::Shape {
                op: "gather_cols",
                left: self.shape(),
                right: (0, bad),
            });
        }
        Ok(Matrix::from_fn(self.rows, cols.len(), |i, k| self.get(i, cols[k])))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return Err(Error::Shape {
                op: "slice_cols",
                left: self.shape(),
                right: (start, len),
            });
        }
        Ok(Matrix::from_fn(self.rows, len, |i, j| self.get(i, start + j)))
    }

    /// Solves `self * x = rhs` for square `self` by Gaussian elimination with
    /// partial pivoting.
    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix> {
        let n = self.rows;
        if self.cols != n || rhs.rows != n {
            return Err(Error::Shape {
                op: "solve",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let k = rhs.cols;
        let mut a = self.data.clone();
        let mut b = rhs.data.clone();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
                .expect("non-empty range");
            if a[pivot * n + col].abs() < 1e-300 {
                return Err(Error::Config("singular system".into()));
            }
            if pivot != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot * n + j);
                }
                for j in 0..k {
                    b.swap(col * k + j, pivot * k + j);
                }
            }
            for i in col + 1..n {
                let f = a[i * n + col] / a[col * n + col];
                for j in col..n {
                    a[i * n + j] -= f * a[col * n + j];
                }
                for j in 0..k {
                    b[i * k + j] -= f * b[col * k + j];
                }
            }
        }
        for col in (0..n).rev() {
            for j in 0..k {
                let mut v = b[col * k + j];
                for i in col + 1..n {
                    v -= a[col * n + i] * b[i * k + j];
                }
                b[col * k + j] = v / a[col * n + col];
            }
        }
        Matrix::from_vec(n, k, b)
    }

    /// True when both matrices have the same shape and identical bit patterns.
    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// FNV-1a over the shape and raw bit patterns. Stable across platforms.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        h.write_u64(self.rows as u64);
        h.write_u64(self.cols as u64);
        for v in &self.data {
            h.write_u64(v.to_bits());
        }
        h.finish()
    }

    /// Little-endian f64 bytes in row-major order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// 64-bit FNV-1a hasher, used for weight checksums.
#[derive(Clone, Copy, Debug)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

/// Matrix with orthonormal rows (`rows <= cols`), from a Householder QR of a
/// Gaussian draw. Sign-corrected so the distribution is Haar.
pub fn random_orthonormal_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    if rows > cols || rows == 0 {
        return Err(Error::Config(format!(
            "cannot build {rows} orthonormal rows in dimension {cols}"
        )));
    }
    // QR of the cols x rows Gaussian; Q's columns become our rows.
    let g = Matrix::gaussian(cols, rows, 1.0, rng);
    let q = householder_q(&g);
    Ok(q.transpose())
}

/// Thin Q factor (n x k) of an n x k matrix with n >= k, with the diagonal of R
/// made positive.
pub fn householder_q(a: &Matrix) -> Matrix {
    let (n, k) = a.shape();
    let mut r = a.data.clone();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut signs = Vec::with_capacity(k);
    for j in 0..k {
        let mut v: Vec<f64> = (j..n).map(|i| r[i * k + j]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            for x in v.iter_mut() {
                *x /= vnorm;
            }
            for c in j..k {
                let dot: f64 = (j..n).map(|i| v[i - j] * r[i * k + c]).sum();
                for i in j..n {
                    r[i * k + c] -= 2.0 * v[i - j] * dot;
                }
            }
        }
        signs.push(if r[j * k + j] < 0.0 { -1.0 } else { 1.0 });
        vs.push(v);
    }
    // Apply the reflectors to the first k columns of the identity.
    let mut q = Matrix::from_fn(n, k, |i, j| if i == j { 1.0 } else { 0.0 }).data;
    for j in (0..k).rev() {
        let v = &vs[j];
        for c in 0..k {
            let dot: f64 = (j..n).map(|i| v[i - j] * q[i * k + c]).sum();
            for i in j..n {
                q[i * k + c] -= 2.0 * v[i - j] * dot;
            }
        }
    }
    for i in 0..n {
        for (c, s) in signs.iter().enumerate() {
            q[i * k + c] *= s;
        }
    }
    Matrix {
        rows: n,
        cols: k,
        data: q,
    }
}
