//! Dense row-major `f64` arrays of rank 1 to 3 and the forward kernels the
//! model is built from.
//!
//! Kernels here are pure. Whenever a kernel runs rows in parallel, every
//! output element is still produced by one thread with a fixed summation
//! order, so results are bitwise reproducible regardless of thread count.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work (in multiply-adds) below which kernels stay single threaded.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::shape("tensor", format!("rank {} not in 1..=3", shape.len())));
        }
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("non-empty vector")
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(m * n);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} values, expected {n}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[m, n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of last-axis slices (product of all leading extents).
    pub fn outer(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn get3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn zip_with(&self, op: &str, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    pub(crate) fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(op, format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub(crate) fn dims3(&self, op: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(op, format!("expected a rank-3 tensor, got shape {:?}", self.shape))),
        }
    }
}

/// Runs `f(row_index, row)` over the `width`-sized chunks of `out`,
/// in parallel when the total work is large enough.
pub(crate) fn for_rows(out: &mut [f64], width: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
    } else {
        out.chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
    }
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} × {:?}: inner extents differ", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for_rows(&mut out, n, m * n * k, |i, row| {
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Tensor::new(&[m, n], out)
}

/// Affine map along the last axis: `x (…×in) · wᵀ + b`, with `w` of shape
/// `out×in` and optional bias of length `out`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (out_dim, in_dim) = w.dims2("linear")?;
    if x.last_dim() != in_dim {
        return Err(Error::shape(
            "linear",
            format!("input {:?} against weight {:?}", x.shape(), w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [out_dim] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} against weight {:?}", b.shape(), w.shape()),
            ));
        }
    }
    let rows = x.outer();
    let mut out = vec![0.0; rows * out_dim];
    let (xd, wd) = (x.data(), w.data());
    let bd = b.map(|b| b.data());
    for_rows(&mut out, out_dim, rows * out_dim * in_dim, |r, row| {
        let xr = &xd[r * in_dim..(r + 1) * in_dim];
        for (o, slot) in row.iter_mut().enumerate() {
            let wr = &wd[o * in_dim..(o + 1) * in_dim];
            let mut s = 0.0;
            for (a, c) in xr.iter().zip(wr) {
                s += a * c;
            }
            *slot = s + bd.map_or(0.0, |b| b[o]);
        }
    });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Tensor::new(&shape, out)
}

/// Batched left multiplication over the middle axis:
/// `out[n, i, c] = Σ_h w[i, h]·x[n, h, c] + b[i]`.
pub fn left_mix(w: &Tensor, x: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (m, h) = w.dims2("left_mix")?;
    let (n, h2, d) = x.dims3("left_mix")?;
    if h != h2 {
        return Err(Error::shape(
            "left_mix",
            format!("weight {:?} against input {:?}", w.shape(), x.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [m] {
            return Err(Error::shape(
                "left_mix",
                format!("bias {:?} against weight {:?}", b.shape(), w.shape()),
            ));
        }
    }
    let mut out = vec![0.0; n * m * d];
    let (wd, xd) = (w.data(), x.data());
    let bd = b.map(|b| b.data());
    for_rows(&mut out, m * d, n * m * h * d, |node, block| {
        let xn = &xd[node * h * d..(node + 1) * h * d];
        for i in 0..m {
            let orow = &mut block[i * d..(i + 1) * d];
            let bias = bd.map_or(0.0, |b| b[i]);
            orow.iter_mut().for_each(|v| *v = bias);
            for p in 0..h {
                let wv = wd[i * h + p];
                for (o, &xv) in orow.iter_mut().zip(&xn[p * d..(p + 1) * d]) {
                    *o += wv * xv;
                }
            }
        }
    });
    Tensor::new(&[n, m, d], out)
}

/// Per-slice statistics kept by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormStats {
    /// Normalized input before gain and bias.
    pub normalized: Tensor,
    /// `1 / sqrt(var + eps)` per last-axis slice.
    pub inv_std: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, LayerNormStats)> {
    let d = x.last_dim();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "input {:?}, gain {:?}, bias {:?}",
                x.shape(),
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let rows = x.outer();
    let mut normalized = x.data().to_vec();
    let mut inv_std = vec![0.0; rows];
    for (slice, is) in normalized.chunks_mut(d).zip(inv_std.iter_mut()) {
        let mean = slice.iter().sum::<f64>() / d as f64;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        *is = 1.0 / (var + eps).sqrt();
        slice.iter_mut().for_each(|v| *v = (*v - mean) * *is);
    }
    let (g, b) = (gain.data(), bias.data());
    let out: Vec<f64> = normalized
        .chunks(d)
        .flat_map(|s| s.iter().zip(g).zip(b).map(|((v, g), b)| v * g + b))
        .collect();
    let normalized = Tensor::new(x.shape(), normalized)?;
    Ok((Tensor::new(x.shape(), out)?, LayerNormStats { normalized, inv_std }))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of exact GELU, `Φ(x) + x·φ(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let ones = m(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &ones).unwrap(), m(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::ones(&[3]);
        let zeros = Tensor::zeros(&[3]);
        let (y, _) = layer_norm(&Tensor::vector(vec![5.0; 3]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let (y, _) = layer_norm(
            &Tensor::vector(vec![1.0, -1.0]),
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            1e-14,
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let (y, _) = layer_norm(&Tensor::vector(vec![7.0; 3]), &ones, &Tensor::full(&[3], 2.0), LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn layer_norm_rejects_gain_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(layer_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[3]), 1e-5).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841345).abs() < 1e-6);
        assert!(gelu_scalar(-20.0).abs() < 1e-12);
    }

    #[test]
    fn left_mix_matches_per_node_matmul() {
        let w = m(&[&[1.0, 2.0], &[0.5, -1.0], &[0.0, 3.0]]);
        let x = Tensor::new(&[2, 2, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let out = left_mix(&w, &x, Some(&Tensor::vector(vec![1.0, 0.0, -1.0]))).unwrap();
        for node in 0..2 {
            let xn = Tensor::new(&[2, 3], x.data()[node * 6..node * 6 + 6].to_vec()).unwrap();
            let expect = matmul(&w, &xn).unwrap();
            for i in 0..3 {
                for c in 0..3 {
                    let bias = [1.0, 0.0, -1.0][i];
                    assert_eq!(out.get3(node, i, c), expect.get2(i, c) + bias);
                }
            }
        }
    }

    #[test]
    fn linear_on_rank3_acts_on_last_axis() {
        let x = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = m(&[&[1.0, 1.0], &[1.0, -1.0], &[2.0, 0.0]]);
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[2, 1, 3]);
        assert_eq!(y.data(), &[3.0, -1.0, 2.0, 7.0, -1.0, 6.0]);
    }
}
