use rand::Rng;
use rand_distr::StandardNormal;

use super::gemm::{gemm, Layout};
use crate::error::{bail, Error, Result};

/// Dense row-major array of `f64`.
///
/// A rank-0 tensor (empty shape) holds a single scalar. Tensors are plain
/// values: every operation returns a new tensor and never touches a gradient
/// tape. Tracked computation goes through [`Var`](super::Var).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            bail!(Dimension, "shape {shape:?} has a zero extent");
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            bail!(
                Dimension,
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            );
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Samples from the standard normal distribution.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self { shape, data }
    }

    /// Samples uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            bail!(Contract, "item() on tensor of shape {:?}", self.shape);
        }
        Ok(self.data[0])
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len()
            || index.iter().zip(&self.shape).any(|(&i, &d)| i >= d)
        {
            bail!(
                Dimension,
                "index {index:?} out of bounds for shape {:?}",
                self.shape
            );
        }
        Ok(index
            .iter()
            .zip(self.strides())
            .map(|(&i, s)| i * s)
            .sum())
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            bail!(Dimension, "transpose needs rank 2, got {:?}", self.shape);
        }
        self.permute(&[1, 0])
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            bail!(
                Dimension,
                "permutation {perm:?} invalid for shape {:?}",
                self.shape
            );
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0usize; rank];
        for _ in 0..self.data.len() {
            let src: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
            data.push(self.data[src]);
            for ax in (0..rank).rev() {
                index[ax] += 1;
                if index[ax] < out_shape[ax] {
                    break;
                }
                index[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            bail!(
                Dimension,
                "matmul shapes {:?} and {:?} are incompatible",
                self.shape,
                other.shape
            );
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            Layout::Normal,
            &other.data,
            Layout::Normal,
            &mut out,
            false,
        );
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    // ---- elementwise -------------------------------------------------------

    fn zip_with(&self, other: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            Ok(Tensor {
                shape: self.shape.clone(),
                data,
            })
        } else if other.is_scalar() {
            let b = other.data[0];
            Ok(self.map(|a| f(a, b)))
        } else if self.is_scalar() {
            let a = self.data[0];
            Ok(other.map(|b| f(a, b)))
        } else {
            bail!(
                Dimension,
                "{what}: shapes {:?} and {:?} differ and neither is a scalar",
                self.shape,
                other.shape
            )
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

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| k * x)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        self.map(|x| x + k)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            bail!(Numeric, "log of nonpositive value {bad}");
        }
        Ok(self.map(f64::ln))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            bail!(Dimension, "axis {axis} invalid for shape {:?}", self.shape);
        }
        Ok(())
    }

    fn reduce_axis(&self, axis: usize, init: f64, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let mut out = vec![init; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &self.data[(o * n + j) * inner..(o * n + j + 1) * inner];
                let acc = &mut out[o * inner..(o + 1) * inner];
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a = f(*a, x);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, 0.0, |a, x| a + x)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let n = self.shape[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, f64::NEG_INFINITY, f64::max)
    }

    // ---- normalisation -----------------------------------------------------

    /// Softmax along `axis`, with the slice maximum subtracted first.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        if !self.all_finite() {
            bail!(Numeric, "softmax of non-finite input");
        }
        let mut out = self.clone();
        let (outer, n, inner) = axis_split(&self.shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| self.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (self.data[idx(j)] - m).exp();
                    out.data[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out.data[idx(j)] /= total;
                }
            }
        }
        Ok(out)
    }

    /// `ln softmax` along `axis`, computed without forming the softmax.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        if !self.all_finite() {
            bail!(Numeric, "log_softmax of non-finite input");
        }
        let mut out = self.clone();
        let (outer, n, inner) = axis_split(&self.shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| self.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|j| (self.data[idx(j)] - m).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out.data[idx(j)] -= lse;
                }
            }
        }
        Ok(out)
    }

    /// Layer normalisation over the last axis followed by the affine map
    /// `gain ⊙ x̂ + bias`. Rows with zero variance and `eps = 0` normalise to 0.
    pub fn layernorm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(layernorm_forward(self, gain, bias, eps)?.0)
    }
}

/// Forward layer norm returning `(y, x̂, 1/σ per row)`.
pub(crate) fn layernorm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("layernorm eps must be >= 0, got {eps}")));
    }
    let d = *x
        .shape
        .last()
        .ok_or_else(|| Error::Dimension("layernorm of a rank-0 tensor".into()))?;
    if gain.len() != d || bias.len() != d {
        bail!(
            Dimension,
            "layernorm gain {:?} / bias {:?} do not match last axis {d}",
            gain.shape,
            bias.shape
        );
    }
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = var + eps;
        let rs = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = gain.data[j] * h + bias.data[j];
        }
    }
    let shape = x.shape.clone();
    Ok((
        Tensor {
            shape: shape.clone(),
            data: y,
        },
        Tensor { shape, data: xhat },
        rstd,
    ))
}
