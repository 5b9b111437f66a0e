//! Dense 64-bit tensors in row-major order.
//!
//! Everything here is deliberately simple: flat `Vec<f64>` storage, fixed
//! accumulation order (row-major, index-ascending) so results are bit-stable
//! across runs, and no broadcasting beyond what the model layers need.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense array of `f64` with row-major layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` and `data` agree and that all
    /// entries are finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("tensor contains non-finite entries".into()));
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but without the finiteness scan. Used on hot
    /// paths where inputs are already known finite.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Interprets the tensor as a matrix, returning `(rows, cols)`.
    /// 1-D tensors are treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::Shape(format!("expected 1-D or 2-D tensor, got {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (r, c) = self.dims2().expect("row() on non-matrix");
        debug_assert!(i < r);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let (r, c) = self.dims2().expect("row_mut() on non-matrix");
        debug_assert!(i < r);
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }
}

/// `a[m×k] · b[k×n]`, accumulated in row-major (i, k, j) order so the
/// summation order is fixed.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a[m×k] · b[n×k]ᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_nt inner dimensions disagree: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a[k×m]ᵀ · b[k×n]` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_tn inner dimensions disagree: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &a.data[kk * m..(kk + 1) * m];
        let brow = &b.data[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let orow = &mut out[i * n..(i + 1) * n];
        softmax_into(row, orow);
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise log-softmax: `x - max - ln(Σ exp(x - max))`.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let orow = &mut out[i * n..(i + 1) * n];
        log_softmax_into(row, orow);
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub(crate) fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// The shared RMS statistic: `√(mean(x²) + eps)`.
pub fn rms_statistic(x: &[f64], eps: f64) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    (ms + eps).sqrt()
}

/// RMSNorm over a vector: `gamma ⊙ x / √(mean(x²) + eps)`.
pub fn rmsnorm(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    if x.shape != gamma.shape {
        return Err(Error::Shape(format!(
            "rmsnorm gain shape {:?} does not match input {:?}",
            gamma.shape, x.shape
        )));
    }
    let s = rms_statistic(&x.data, eps);
    let data = x
        .data
        .iter()
        .zip(&gamma.data)
        .map(|(v, g)| g * v / s)
        .collect();
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

/// RMSNorm applied independently to each row of a matrix.
pub fn rmsnorm_rows(x: &Tensor, gamma: &[f64], eps: f64) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if gamma.len() != n {
        return Err(Error::Shape(format!(
            "rmsnorm gain length {} does not match row width {}",
            gamma.len(),
            n
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let s = rms_statistic(row, eps);
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = gamma[j] * row[j] / s;
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// `a + b` elementwise.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("add shapes {:?} vs {:?}", a.shape, b.shape)));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape.clone(), data))
}
