//! Dense row-major tensors, a tape-based reverse-mode autodiff graph, and
//! the optimizers used to train both networks.
//!
//! All kernels reduce in a fixed order (ascending index along the reduced
//! axis), so results are reproducible bit-for-bit on a single thread.

mod graph;
mod gradcheck;
mod optim;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use graph::{Graph, Var};
pub use optim::{OptimizerMode, OptimizerState, Touch};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Length(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{op} produced non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, &self.shape, &[])),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// `self[m×k] · other[k×p]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, p) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let row = &mut out[i * p..(i + 1) * p];
            for kk in 0..k {
                let a = self.data[i * k + kk];
                let b = &other.data[kk * p..(kk + 1) * p];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Tensor::new(vec![m, p], out)
    }

    /// `self[m×k] · other[p×k]ᵀ`, each output a dot product summed in
    /// ascending `k`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (p, k2) = other.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..p {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * p + j] = dot(a, b);
            }
        }
        Tensor::new(vec![m, p], out)
    }

    /// `self[k×m]ᵀ · other[k×p]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2("matmul_tn")?;
        let (k2, p) = other.dims2("matmul_tn")?;
        if k != k2 {
            return Err(Error::shape("matmul_tn", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * p];
        for kk in 0..k {
            let b = &other.data[kk * p..(kk + 1) * p];
            for i in 0..m {
                let a = self.data[kk * m + i];
                let row = &mut out[i * p..(i + 1) * p];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Tensor::new(vec![m, p], out)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("add_row")?;
        if row.shape != [c] {
            return Err(Error::shape("add_row", &self.shape, &row.shape));
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Tensor::new(vec![r, c], out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Leading `rows` rows of a matrix (or leading entries of a vector).
    pub fn prefix_rows(&self, rows: usize) -> Result<Tensor> {
        match self.shape.as_slice() {
            [n] if rows >= 1 && rows <= *n => Tensor::new(vec![rows], self.data[..rows].to_vec()),
            [r, c] if rows >= 1 && rows <= *r => {
                Tensor::new(vec![rows, *c], self.data[..rows * c].to_vec())
            }
            _ => Err(Error::shape("prefix_rows", &self.shape, &[rows])),
        }
    }

    /// Leading `cols` columns of a matrix.
    pub fn prefix_cols(&self, cols: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("prefix_cols")?;
        if cols == 0 || cols > c {
            return Err(Error::shape("prefix_cols", &self.shape, &[cols]));
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c..i * c + cols]);
        }
        Tensor::new(vec![r, cols], out)
    }

    fn column_layout(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [h, n] => Ok((1, *h, *n)),
            [b, h, n] => Ok((*b, *h, *n)),
            _ => Err(Error::shape(op, &self.shape, &[])),
        }
    }

    /// Softmax down each column of an `h×n` matrix (or of each `h×n` slab of
    /// a `b×h×n` tensor), with per-column max subtraction.
    pub fn column_softmax(&self) -> Result<Tensor> {
        Ok(self.column_log_softmax()?.map(f64::exp))
    }

    pub fn column_log_softmax(&self) -> Result<Tensor> {
        self.ensure_finite("column_softmax input")?;
        let (b, h, n) = self.column_layout("column_softmax")?;
        let mut out = vec![0.0; self.numel()];
        for s in 0..b {
            let base = s * h * n;
            for i in 0..n {
                let mut max = f64::NEG_INFINITY;
                for l in 0..h {
                    max = max.max(self.data[base + l * n + i]);
                }
                let mut total = 0.0;
                for l in 0..h {
                    total += (self.data[base + l * n + i] - max).exp();
                }
                let log_total = total.ln();
                for l in 0..h {
                    out[base + l * n + i] = self.data[base + l * n + i] - max - log_total;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Mean cross-entropy of each row of `logits[b×k]` against `labels`, with
/// the per-row softmax probabilities.
pub(crate) fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = logits.dims2("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", &logits.shape, &[labels.len()]));
    }
    logits.ensure_finite("cross_entropy input")?;
    let mut probs = vec![0.0; b * k];
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Index { index: label, len: k });
        }
        let row = &logits.data[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row {
            z += (v - max).exp();
        }
        let log_z = z.ln() + max;
        total += log_z - row[label];
        for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
            *p = (v - log_z).exp();
        }
    }
    Ok((total / b as f64, Tensor::new(vec![b, k], probs)?))
}

/// Per-row cross-entropy of `logits[b×k]`.
pub(crate) fn row_losses(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (b, k) = logits.dims2("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", &logits.shape, &[labels.len()]));
    }
    logits.ensure_finite("cross_entropy input")?;
    labels
        .iter()
        .enumerate()
        .map(|(r, &label)| {
            if label >= k {
                return Err(Error::Index { index: label, len: k });
            }
            let row = &logits.data[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            Ok(z.ln() + max - row[label])
        })
        .collect()
}

/// `−log softmax(logits)[label]` for a single logit vector.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let k = logits.numel();
    let row = logits.reshape(&[1, k])?;
    Ok(cross_entropy_rows(&row, &[label])?.0)
}
