//! Convolution, pooling and upsampling kernels on `[C, H, W, B]` feature
//! stacks, with their adjoints.
//!
//! All convolutions are 3-D with odd kernel extents and reflect padding of
//! half the extent on each axis, so spatial and band extents are preserved.
//! The kernel extent is read off the weight shape:
//!
//! | weight shape               | kernel   | use                     |
//! |----------------------------|----------|-------------------------|
//! | `[Co, Ci]`                 | 1×1×1    | pointwise channel mix   |
//! | `[Co, Ci, kb]`             | 1×1×kb   | spectral (1×1×5)        |
//! | `[Co, Ci, kh, kw]`         | kh×kw×1  | spatial per band (3×3×1)|
//! | `[Co, Ci, kh, kw, kb]`     | kh×kw×kb | full 3-D (3×3×3)        |
//!
//! Each convolution is lowered to one GEMM over an im2col matrix of shape
//! `[Ci·taps, H·W·B]`.

use crate::cube::reflect_index;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelExtent {
    pub h: usize,
    pub w: usize,
    pub b: usize,
}

impl KernelExtent {
    pub fn taps(&self) -> usize {
        self.h * self.w * self.b
    }

    fn is_pointwise(&self) -> bool {
        self.taps() == 1
    }
}

/// `(c_out, c_in, extent)` for a convolution weight.
pub fn kernel_geometry(weight: &[usize]) -> Result<(usize, usize, KernelExtent)> {
    let ext = match weight.len() {
        2 => KernelExtent { h: 1, w: 1, b: 1 },
        3 => KernelExtent { h: 1, w: 1, b: weight[2] },
        4 => KernelExtent { h: weight[2], w: weight[3], b: 1 },
        5 => KernelExtent { h: weight[2], w: weight[3], b: weight[4] },
        _ => return Err(Error::invalid(format!("unsupported conv weight shape {weight:?}"))),
    };
    if ext.h % 2 == 0 || ext.w % 2 == 0 || ext.b % 2 == 0 {
        return Err(Error::invalid(format!("conv kernel extents must be odd, got {weight:?}")));
    }
    Ok((weight[0], weight[1], ext))
}

fn feature_dims(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [c, h, w, b] => Ok((c, h, w, b)),
        _ => Err(Error::invalid(format!(
            "feature stack must be [C, H, W, B], got {:?}",
            x.shape()
        ))),
    }
}

/// `c = a · b + beta · c` for row-major operands, optionally transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: bounds asserted above; strides describe dense row-major
    // (or transposed) matrices lying entirely inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Source indices of each kernel tap along one axis, compressed into
/// `(start, len)` runs of consecutive indices.
fn reflect_runs(k: usize, n: usize) -> Vec<Vec<(usize, usize)>> {
    let pad = (k / 2) as isize;
    (0..k)
        .map(|t| {
            let mut runs: Vec<(usize, usize)> = Vec::new();
            for p in 0..n {
                let src = reflect_index(p as isize + t as isize - pad, n);
                match runs.last_mut() {
                    Some((start, len)) if *start + *len == src => *len += 1,
                    _ => runs.push((src, 1)),
                }
            }
            runs
        })
        .collect()
}

fn reflect_table(k: usize, n: usize) -> Vec<Vec<usize>> {
    let pad = (k / 2) as isize;
    (0..k)
        .map(|t| (0..n).map(|p| reflect_index(p as isize + t as isize - pad, n)).collect())
        .collect()
}

struct Taps {
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
    col_runs: Vec<Vec<(usize, usize)>>,
    band_runs: Vec<Vec<(usize, usize)>>,
}

impl Taps {
    fn new(ext: KernelExtent, h: usize, w: usize, b: usize) -> Self {
        Self {
            rows: reflect_table(ext.h, h),
            cols: reflect_table(ext.w, w),
            col_runs: reflect_runs(ext.w, w),
            band_runs: reflect_runs(ext.b, b),
        }
    }

    /// Visits, in im2col row order, every contiguous source span
    /// `(channel, offset, len)` that makes up the patch matrix.
    fn for_each_span(&self, ext: KernelExtent, c_in: usize, w: usize, b: usize, mut f: impl FnMut(usize, usize, usize)) {
        for c in 0..c_in {
            for i in 0..ext.h {
                for j in 0..ext.w {
                    for t in 0..ext.b {
                        if ext.b == 1 {
                            // Bands are untouched: whole pixel runs are contiguous.
                            for &sy in &self.rows[i] {
                                for &(sx, len) in &self.col_runs[j] {
                                    f(c, (sy * w + sx) * b, len * b);
                                }
                            }
                        } else {
                            for &sy in &self.rows[i] {
                                for &sx in &self.cols[j] {
                                    let base = (sy * w + sx) * b;
                                    for &(sz, len) in &self.band_runs[t] {
                                        f(c, base + sz, len);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Runs `f` with two reusable scratch buffers (patch matrix, patch gradient).
fn with_scratch<R>(f: impl FnOnce(&mut Vec<f64>, &mut Vec<f64>) -> R) -> R {
    SCRATCH.with(|cell| match cell.try_borrow_mut() {
        Ok(mut bufs) => {
            let (a, b) = &mut *bufs;
            f(a, b)
        }
        Err(_) => f(&mut Vec::new(), &mut Vec::new()),
    })
}

/// Fills `cols` with the `[Ci·taps, H·W·B]` patch matrix of `x`.
fn im2col_into(x: &Tensor, ext: KernelExtent, cols: &mut Vec<f64>) {
    let (c_in, h, w, b) = feature_dims(x).expect("checked by caller");
    let vol = h * w * b;
    let taps = Taps::new(ext, h, w, b);
    cols.clear();
    cols.reserve(c_in * ext.taps() * vol);
    let xd = x.data();
    taps.for_each_span(ext, c_in, w, b, |c, off, len| {
        let start = c * vol + off;
        cols.extend_from_slice(&xd[start..start + len]);
    });
    debug_assert_eq!(cols.len(), c_in * ext.taps() * vol);
}

/// Adjoint of [`im2col_into`]: scatter-adds patch gradients onto the input.
fn col2im(dcols: &[f64], c_in: usize, h: usize, w: usize, b: usize, ext: KernelExtent) -> Vec<f64> {
    let vol = h * w * b;
    let taps = Taps::new(ext, h, w, b);
    let mut dx = vec![0.0; c_in * vol];
    let mut pos = 0;
    taps.for_each_span(ext, c_in, w, b, |c, off, len| {
        let start = c * vol + off;
        for (d, s) in dx[start..start + len].iter_mut().zip(&dcols[pos..pos + len]) {
            *d += s;
        }
        pos += len;
    });
    dx
}

fn check_conv_args(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, KernelExtent)> {
    let (c_in, ..) = feature_dims(x)?;
    let (c_out, w_in, ext) = kernel_geometry(weight.shape())?;
    if w_in != c_in {
        return Err(Error::invalid(format!(
            "channel mismatch: input has {c_in} channels, kernel expects {w_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::mismatch(bias.shape(), &[c_out]));
    }
    Ok((c_out, c_in, ext))
}

/// `out[co, h, w, b] = bias[co] + Σ k[co, ci, i, j, t] · x_pad[ci, h+i, w+j, b+t]`.
pub fn conv3d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c_out, c_in, ext) = check_conv_args(x, weight, bias)?;
    let (_, h, w, b) = feature_dims(x)?;
    let vol = h * w * b;
    let mut out = vec![0.0; c_out * vol];
    for (co, row) in out.chunks_mut(vol).enumerate() {
        row.fill(bias.data()[co]);
    }
    let depth = c_in * ext.taps();
    if ext.is_pointwise() {
        gemm(c_out, depth, vol, weight.data(), false, x.data(), false, 1.0, &mut out);
    } else {
        with_scratch(|cols, _| {
            im2col_into(x, ext, cols);
            gemm(c_out, depth, vol, weight.data(), false, cols, false, 1.0, &mut out);
        });
    }
    Tensor::from_vec(&[c_out, h, w, b], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Adjoint of [`conv3d`] given the upstream gradient `grad_out`.
pub fn conv3d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let (c_in, h, w, b) = feature_dims(x)?;
    let (c_out, _, ext) = kernel_geometry(weight.shape())?;
    if grad_out.shape() != [c_out, h, w, b] {
        return Err(Error::mismatch(grad_out.shape(), &[c_out, h, w, b]));
    }
    let vol = h * w * b;
    let depth = c_in * ext.taps();
    let g = grad_out.data();

    let bias_grad: Vec<f64> = g.chunks(vol).map(|row| row.iter().sum()).collect();

    let mut wgrad = vec![0.0; c_out * depth];
    let input = with_scratch(|cols_buf, dcols| -> Result<Option<Tensor>> {
        let cols: &[f64] = if ext.is_pointwise() {
            x.data()
        } else {
            im2col_into(x, ext, cols_buf);
            cols_buf
        };
        gemm(c_out, vol, depth, g, false, cols, true, 0.0, &mut wgrad);
        if !need_input {
            return Ok(None);
        }
        // beta = 0: the GEMM never reads the stale contents of `dcols`.
        if dcols.len() < depth * vol {
            dcols.resize(depth * vol, 0.0);
        }
        let dcols = &mut dcols[..depth * vol];
        gemm(depth, c_out, vol, weight.data(), true, g, false, 0.0, dcols);
        let dx = if ext.is_pointwise() {
            dcols.to_vec()
        } else {
            col2im(dcols, c_in, h, w, b, ext)
        };
        Ok(Some(Tensor::from_vec(&[c_in, h, w, b], dx)?))
    })?;

    Ok(ConvGrads {
        input,
        weight: Tensor::from_vec(weight.shape(), wgrad)?,
        bias: Tensor::from_vec(&[c_out], bias_grad)?,
    })
}

/// 2×2, stride-2 spatial max pooling applied to every band of every
/// channel. Returns the pooled stack and, per output element, the linear
/// input index that won (first maximum in window order).
pub fn maxpool2d_per_band(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w, b) = feature_dims(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "max pooling needs even spatial extents, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * ho * wo * b);
    let mut arg = Vec::with_capacity(c * ho * wo * b);
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                for k in 0..b {
                    let idx = |di: usize, dj: usize| ((ch * h + 2 * i + di) * w + 2 * j + dj) * b + k;
                    let mut best = idx(0, 0);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = idx(di, dj);
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[c, ho, wo, b], out)?, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::invalid("pooling argmax/gradient length mismatch"));
    }
    let mut dx = Tensor::zeros(input_shape)?;
    let d = dx.data_mut();
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        d[src] += g;
    }
    Ok(dx)
}

/// Nearest-neighbour 2× spatial upsampling of every band.
pub fn upsample2d_per_band(x: &Tensor) -> Result<Tensor> {
    let (c, h, w, b) = feature_dims(x)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(c * 4 * h * w * b);
    for ch in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                let base = ((ch * h + i / 2) * w + j / 2) * b;
                out.extend_from_slice(&xd[base..base + b]);
            }
        }
    }
    Tensor::from_vec(&[c, 2 * h, 2 * w, b], out)
}

pub fn upsample2d_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (c, h2, w2, b) = feature_dims(grad_out)?;
    let (h, w) = (h2 / 2, w2 / 2);
    let g = grad_out.data();
    let mut dx = vec![0.0; c * h * w * b];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let src = ((ch * h2 + i) * w2 + j) * b;
                let dst = ((ch * h + i / 2) * w + j / 2) * b;
                for k in 0..b {
                    dx[dst + k] += g[src + k];
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, w, b], dx)
}

/// Stacks feature tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let (_, h, w, b) = feature_dims(first)?;
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        let (c, ph, pw, pb) = feature_dims(p)?;
        if (ph, pw, pb) != (h, w, b) {
            return Err(Error::mismatch(p.shape(), first.shape()));
        }
        channels += c;
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[channels, h, w, b], data)
}
