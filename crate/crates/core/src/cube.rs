//! Hyperspectral cube: an `H × W × B` tensor, band axis fastest.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Cube(Tensor);

impl Cube {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::invalid(format!(
                "a cube must be rank 3 (H x W x B), got shape {:?}",
                tensor.shape()
            )));
        }
        Ok(Self(tensor))
    }

    pub fn from_vec(h: usize, w: usize, b: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::from_vec(&[h, w, b], data)?)
    }

    pub fn zeros(h: usize, w: usize, b: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[h, w, b])?)
    }

    pub fn full(h: usize, w: usize, b: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[h, w, b], value)?)
    }

    pub fn uniform(rng: &mut Rng, h: usize, w: usize, b: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(Tensor::uniform(rng, &[h, w, b], lo, hi)?)
    }

    pub fn from_fn(h: usize, w: usize, b: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w * b);
        for i in 0..h {
            for j in 0..w {
                for k in 0..b {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::from_vec(h, w, b, data)
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.0.shape()[2]
    }

    /// `(H, W, B)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.bands())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.width() + j) * self.bands() + k
    }

    /// Unchecked-by-`Result` accessor; panics on out-of-range indices.
    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        assert!(i < self.height() && j < self.width() && k < self.bands());
        self.0.data()[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        assert!(i < self.height() && j < self.width() && k < self.bands());
        let o = self.offset(i, j, k);
        self.0.data_mut()[o] = v;
    }

    /// Band `k` as an `H × W` row-major image.
    pub fn band(&self, k: usize) -> Vec<f64> {
        let (h, w, b) = self.dims();
        let d = self.data();
        (0..h * w).map(|p| d[p * b + k]).collect()
    }

    /// Spectrum of pixel `(i, j)`.
    pub fn spectrum(&self, i: usize, j: usize) -> &[f64] {
        let b = self.bands();
        let o = self.offset(i, j, 0);
        &self.data()[o..o + b]
    }

    pub fn check_same_shape(&self, other: &Cube) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::mismatch(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Cube {
        Cube(self.0.map(f))
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }

    /// Reflect-pads the spatial axes at the bottom/right edge up to `(h, w)`.
    pub fn reflect_pad_to(&self, h: usize, w: usize) -> Result<Cube> {
        let (h0, w0, b) = self.dims();
        if h < h0 || w < w0 {
            return Err(Error::invalid("padding target smaller than cube"));
        }
        Cube::from_fn(h, w, b, |i, j, k| {
            self.at(reflect_index(i as isize, h0), reflect_index(j as isize, w0), k)
        })
    }

    /// Top-left `h × w` spatial window.
    pub fn crop(&self, h: usize, w: usize) -> Result<Cube> {
        let (h0, w0, b) = self.dims();
        if h > h0 || w > w0 {
            return Err(Error::invalid("crop window larger than cube"));
        }
        Cube::from_fn(h, w, b, |i, j, k| self.at(i, j, k))
    }
}

impl From<Cube> for Tensor {
    fn from(c: Cube) -> Tensor {
        c.0
    }
}

impl TryFrom<Tensor> for Cube {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Cube> {
        Cube::new(t)
    }
}

/// Mirror index without edge repetition (`-1 → 1`, `n → n - 2`), folded
/// periodically so any offset is valid. An extent of 1 maps everything to 0.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}
