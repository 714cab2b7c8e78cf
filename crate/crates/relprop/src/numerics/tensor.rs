//! Dense row-major f32 tensor plus the handful of kernels the model needs.
//!
//! Reductions that feed divisions (softmax denominators, layer-norm moments)
//! accumulate in f64; storage and matmul accumulation stay f32.

use super::NumericsError;

/// Dense multi-dimensional array of 32-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking the dims/data contract and finiteness.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, NumericsError> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(NumericsError::BadConstruction {
                dims,
                expected,
                got: data.len(),
            });
        }
        let t = Tensor { dims, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Row count of a matrix; a vector is treated as a single row.
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            1 => 1,
            2 => self.dims[0],
            _ => panic!("rows() on rank-{} tensor", self.dims.len()),
        }
    }

    /// Column count of a matrix or vector.
    pub fn cols(&self) -> usize {
        match self.dims.len() {
            1 => self.dims[0],
            2 => self.dims[1],
            _ => panic!("cols() on rank-{} tensor", self.dims.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            dims: vec![n, m],
            data: out,
        }
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), NumericsError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }
}

/// Standard matrix product; `a` is `[m, k]`, `b` is `[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.rank() > 2 || b.rank() > 2 || a.cols() != b.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f32; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    let t = Tensor {
        dims: vec![m, n],
        data: out,
    };
    t.check_finite("matmul")?;
    Ok(t)
}

/// Accumulating kernel: `c += a @ b`, all row-major. The i-k-j order keeps the
/// inner loop contiguous so it vectorizes.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// Softmax along `axis`, with the lane max subtracted before exponentiation
/// and an f64 denominator.
pub fn stable_softmax(x: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
    if axis >= x.rank() {
        return Err(NumericsError::BadAxis {
            op: "stable_softmax",
            axis,
            rank: x.rank(),
        });
    }
    let dims = x.dims().to_vec();
    let axis_len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = vec![0.0f32; x.numel()];
    let data = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            softmax_lane(data, &mut out, base, axis_len, inner);
        }
    }
    Ok(Tensor { dims, data: out })
}

/// One softmax lane at stride `stride`, writing probabilities into `out`.
pub(crate) fn softmax_lane(data: &[f32], out: &mut [f32], base: usize, len: usize, stride: usize) {
    let mut max = f32::NEG_INFINITY;
    for i in 0..len {
        max = max.max(data[base + i * stride]);
    }
    let mut denom = 0.0f64;
    for i in 0..len {
        denom += f64::from(data[base + i * stride] - max).exp();
    }
    for i in 0..len {
        let e = f64::from(data[base + i * stride] - max).exp();
        out[base + i * stride] = (e / denom) as f32;
    }
}

/// Per-row layer normalization over the last dimension, with `eps` inside the
/// square root and f64 moment accumulation.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f32,
) -> Result<Tensor, NumericsError> {
    let width = x.cols();
    if gain.numel() != width || bias.numel() != width {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm",
            left: x.dims().to_vec(),
            right: gain.dims().to_vec(),
        });
    }
    let mut out = vec![0.0f32; x.numel()];
    let rows = x.numel() / width;
    for r in 0..rows {
        let row = &x.data()[r * width..(r + 1) * width];
        let orow = &mut out[r * width..(r + 1) * width];
        layer_norm_row(row, gain.data(), bias.data(), eps, orow);
    }
    Ok(Tensor {
        dims: x.dims().to_vec(),
        data: out,
    })
}

pub(crate) fn layer_norm_row(row: &[f32], gain: &[f32], bias: &[f32], eps: f32, out: &mut [f32]) {
    let n = row.len() as f64;
    let mut mean = 0.0f64;
    for &v in row {
        mean += f64::from(v);
    }
    mean /= n;
    let mut var = 0.0f64;
    for &v in row {
        let d = f64::from(v) - mean;
        var += d * d;
    }
    var /= n;
    let inv = 1.0 / (var + f64::from(eps)).sqrt();
    for i in 0..row.len() {
        let y = (f64::from(row[i]) - mean) * inv;
        out[i] = (y * f64::from(gain[i]) + f64::from(bias[i])) as f32;
    }
}
