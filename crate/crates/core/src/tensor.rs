//! Dense row-major `f64` tensors and the seeded random source.
//!
//! Storage is a flat `Vec<f64>` with the last axis fastest. There is no
//! broadcasting and no strided views; every operation produces a fresh,
//! contiguous tensor.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Seeded, portable random stream.
///
/// Backed by ChaCha8, a counter-based generator whose output is identical
/// on every platform for a given seed.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this one's seed and a stream id.
    /// Does not advance `self`.
    pub fn substream(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform sample in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        rand_distr::StandardNormal.sample(&mut self.inner)
    }

    /// `k` distinct indices from `0..n`, in the order they were drawn.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}

/// Dense N-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::InvalidShape(shape.to_vec()))
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        if !(lo < hi) {
            return Err(Error::invalid(format!("uniform bounds need lo < hi, got [{lo}, {hi})")));
        }
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn gaussian(rng: &mut Rng, shape: &[usize], mean: f64, sigma: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        if !(sigma >= 0.0) {
            return Err(Error::invalid(format!("gaussian sigma must be >= 0, got {sigma}")));
        }
        if sigma == 0.0 {
            return Self::full(shape, mean);
        }
        let normal = Normal::new(mean, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..n).map(|_| normal.sample(&mut rng.inner)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for d in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.shape[d + 1];
        }
        strides
    }

    pub fn linear_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, e)| i >= e) {
            return Err(Error::IndexOutOfRange {
                index: index.to_vec(),
                shape: self.shape.clone(),
            });
        }
        Ok(index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum())
    }

    pub fn multi_index(&self, mut linear: usize) -> Result<Vec<usize>> {
        if linear >= self.data.len() {
            return Err(Error::IndexOutOfRange {
                index: vec![linear],
                shape: self.shape.clone(),
            });
        }
        let mut index = vec![0; self.shape.len()];
        for d in (0..self.shape.len()).rev() {
            index[d] = linear % self.shape[d];
            linear /= self.shape[d];
        }
        Ok(index)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.linear_index(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let i = self.linear_index(index)?;
        self.data[i] = value;
        Ok(())
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::mismatch(&self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::mismatch(&self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::mismatch(&self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Splits the shape around `axis` into `(outer, extent, inner)`.
    pub(crate) fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.shape.len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for rank {}",
                self.shape.len()
            )));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Forward difference along `axis`: `out[..i..] = a[..i+1..] - a[..i..]`.
    ///
    /// On a cube `[H, W, B]`, axis 0 is the vertical operator, axis 1 the
    /// horizontal one and axis 2 the spectral one.
    pub fn slice_shift_diff(&self, axis: usize) -> Result<Self> {
        let (outer, n, inner) = self.axis_split(axis)?;
        if n < 2 {
            return Err(Error::invalid(format!(
                "difference along axis {axis} needs extent >= 2, got {n}"
            )));
        }
        let mut shape = self.shape.clone();
        shape[axis] = n - 1;
        let mut data = Vec::with_capacity(outer * (n - 1) * inner);
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..n - 1 {
                let lo = &self.data[base + i * inner..base + (i + 1) * inner];
                let hi = &self.data[base + (i + 1) * inner..base + (i + 2) * inner];
                data.extend(hi.iter().zip(lo).map(|(h, l)| h - l));
            }
        }
        Ok(Self { shape, data })
    }

    /// Adjoint of [`Tensor::slice_shift_diff`]: scatters `grad` (shape with
    /// extent `n - 1` along `axis`) back onto a tensor of extent `n`.
    pub(crate) fn slice_shift_diff_adjoint(grad: &Tensor, axis: usize, n: usize) -> Result<Self> {
        let (outer, m, inner) = grad.axis_split(axis)?;
        if m + 1 != n {
            return Err(Error::invalid("difference adjoint extent mismatch"));
        }
        let mut shape = grad.shape.clone();
        shape[axis] = n;
        let mut data = vec![0.0; outer * n * inner];
        for o in 0..outer {
            for i in 0..m {
                let g = &grad.data[(o * m + i) * inner..(o * m + i + 1) * inner];
                let lo = (o * n + i) * inner;
                let hi = (o * n + i + 1) * inner;
                for (k, &gv) in g.iter().enumerate() {
                    data[lo + k] -= gv;
                    data[hi + k] += gv;
                }
            }
        }
        Ok(Self { shape, data })
    }
}
