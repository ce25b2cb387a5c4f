//! Dense row-major `f32` tensors and the numeric kernels shared by the tape.
//!
//! Reductions (dot products, row sums, means) accumulate in `f64` and round
//! once on store.

use crate::error::{shape_err, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian-initialized tensor with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of last-axis slices.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a single value, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(self, "matmul lhs")?;
        let (k2, p) = as_matrix(other, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err("matmul inner extents", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: vec![m, p],
            data: matmul(&self.data, &other.data, m, k, p),
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = as_matrix(self, "transpose")?;
        Ok(Tensor {
            shape: vec![n, m],
            data: transpose(&self.data, m, n),
        })
    }

    /// Adds `bias` (length = last extent) to every last-axis slice.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = self.cols();
        if bias.len() != c {
            return Err(shape_err("row bias", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c.max(1)) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = as_matrix(self, "slice_cols")?;
        if start + len > n {
            return Err(Error::Index(format!(
                "column slice {start}..{} of {n} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&self.data[r * n + start..r * n + start + len]);
        }
        Ok(Tensor {
            shape: vec![m, len],
            data,
        })
    }

    /// Rows `[start, start + len)` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = as_matrix(self, "slice_rows")?;
        if start + len > m {
            return Err(Error::Index(format!(
                "row slice {start}..{} of {m} rows",
                start + len
            )));
        }
        Ok(Tensor {
            shape: vec![len, n],
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub(crate) fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [m, n] => Ok((*m, *n)),
        [n] => Ok((1, *n)),
        s => Err(Error::Dimension(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

/// `a[m×k] · b[k×p]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * p];
    let mut acc = vec![0.0f64; p];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[kk * p..(kk + 1) * p];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out[i * p..(i + 1) * p].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    out
}

/// `a[m×k] · b[p×k]ᵀ`.
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, p: usize) -> Vec<f32> {
    matmul(a, &transpose(b, p, k), m, k, p)
}

/// `a[k×m]ᵀ · b[k×p]`.
pub fn matmul_at(a: &[f32], b: &[f32], k: usize, m: usize, p: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; m * p];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * p..(kk + 1) * p];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            for (s, &bv) in acc[i * p..(i + 1) * p].iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub fn transpose(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Numerically stable softmax of `x / scale` for one slice.
pub fn softmax_slice(x: &[f32], scale: f32, out: &mut [f32]) {
    let inv = 1.0 / scale as f64;
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 * inv));
    let mut total = 0.0f64;
    let mut exps = Vec::with_capacity(x.len());
    for &v in x {
        let e = (v as f64 * inv - max).exp();
        total += e;
        exps.push(e);
    }
    for (o, e) in out.iter_mut().zip(exps) {
        *o = (e / total) as f32;
    }
}

/// Row-wise softmax of `x / scale` over the last axis.
pub fn softmax_rows(x: &Tensor, scale: f32) -> Result<Tensor> {
    if x.cols() == 0 {
        return Err(Error::Dimension("softmax over an empty axis".into()));
    }
    if !(scale > 0.0) {
        return Err(Error::Contract(format!("softmax scale must be positive, got {scale}")));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let c = x.cols();
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data.chunks(c).zip(out.data.chunks_mut(c)) {
        softmax_slice(src, scale, dst);
    }
    Ok(out)
}

/// Standard normal CDF via erf.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x * normal_cdf(x)) as f32
}

pub(crate) fn gelu_grad_scalar(x: f32) -> f64 {
    let x = x as f64;
    normal_cdf(x) + x * normal_pdf(x)
}
