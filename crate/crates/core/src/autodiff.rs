//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every tracked operation in creation order, which is
//! also a valid topological order: an operation can only reference nodes
//! that already exist. [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients by summation over all paths.
//!
//! The tape is rebuilt for every optimisation step. Leaves created with
//! `requires_grad = true` receive a gradient after `backward`, including an
//! all-zero one when the loss does not depend on them.
//!
//! ```
//! use hsdip::autodiff::Tape;
//! use hsdip::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap(), true);
//! let loss = tape.sum_sq(x);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 8.0]);
//! ```

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumAbs(Var),
    SumSq(Var),
    Diff(Var, usize),
    Conv { input: Var, weight: Var, bias: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample(Var),
    Concat(Vec<Var>),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Crop(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn sum_abs(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_abs());
        let rg = self.needs(&[a]);
        self.push(value, Op::SumAbs(a), rg)
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_sq());
        let rg = self.needs(&[a]);
        self.push(value, Op::SumSq(a), rg)
    }

    pub fn diff(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).slice_shift_diff(axis)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Diff(a, axis), rg))
    }

    /// Reflect-padded 3-D convolution; see [`crate::conv`] for the kernel
    /// shape conventions.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = conv::conv3d(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(value, Op::Conv { input, weight, bias }, rg))
    }

    /// 3×3×1 kernel `[Co, Ci, 3, 3]` applied to every band.
    pub fn conv_spatial(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.expect_kernel(weight, &[3, 3])?;
        self.conv(input, weight, bias)
    }

    /// 1×1×5 kernel `[Co, Ci, 5]` applied at every pixel.
    pub fn conv_spectral(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.expect_kernel(weight, &[5])?;
        self.conv(input, weight, bias)
    }

    fn expect_kernel(&self, weight: Var, tail: &[usize]) -> Result<()> {
        let s = self.value(weight).shape();
        if s.len() != 2 + tail.len() || &s[2..] != tail {
            return Err(Error::invalid(format!(
                "expected kernel [Co, Ci, {tail:?}], got {s:?}"
            )));
        }
        Ok(())
    }

    pub fn maxpool2d_per_band(&mut self, input: Var) -> Result<Var> {
        let (value, argmax) = conv::maxpool2d_per_band(self.value(input))?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    pub fn upsample2d_per_band(&mut self, input: Var) -> Result<Var> {
        let value = conv::upsample2d_per_band(self.value(input))?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Upsample(input), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = conv::concat_channels(&tensors)?;
        let rg = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.needs(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Top-left `h × w` spatial window of a `[C, H, W, B]` stack.
    pub fn crop_spatial(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.value(a);
        let (c, h0, w0, b) = match *x.shape() {
            [c, h0, w0, b] => (c, h0, w0, b),
            _ => return Err(Error::invalid("crop needs a [C, H, W, B] stack")),
        };
        if h > h0 || w > w0 {
            return Err(Error::invalid("crop window larger than input"));
        }
        let xd = x.data();
        let mut data = Vec::with_capacity(c * h * w * b);
        for ch in 0..c {
            for i in 0..h {
                let start = ((ch * h0 + i) * w0) * b;
                data.extend_from_slice(&xd[start..start + w * b]);
            }
        }
        let value = Tensor::from_vec(&[c, h, w, b], data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Crop(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    /// Only leaf gradients are retained afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call reset() first".into(),
            ));
        }
        if self.value(loss).shape() != [1] {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
        }

        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grad.is_none() {
                *grad = Some(Tensor::zeros(node.value.shape())?);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        // The op is moved out so the node list can be borrowed while
        // gradients are accumulated, then put back.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate_op(i, &op, g);
        self.nodes[i].op = op;
        result
    }

    fn propagate_op(&mut self, i: usize, op: &Op, g: &Tensor) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.clone())?;
                self.accumulate(b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone())?;
                self.accumulate(b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let ga = g.mul(self.value(b))?;
                    self.accumulate(a, ga)?;
                }
                if self.wants(b) {
                    let gb = g.mul(self.value(a))?;
                    self.accumulate(b, gb)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(a, g.scale(c))?,
            Op::Sum(a) => {
                let s = g.data()[0];
                let ga = Tensor::full(self.value(a).shape(), s)?;
                self.accumulate(a, ga)?;
            }
            Op::SumAbs(a) => {
                let s = g.data()[0];
                // Subgradient of |x| at 0 is taken as 0.
                let ga = self.value(a).map(|x| s * sign(x));
                self.accumulate(a, ga)?;
            }
            Op::SumSq(a) => {
                let s = g.data()[0];
                let ga = self.value(a).scale(2.0 * s);
                self.accumulate(a, ga)?;
            }
            Op::Diff(a, axis) => {
                let n = self.value(a).shape()[axis];
                let ga = Tensor::slice_shift_diff_adjoint(g, axis, n)?;
                self.accumulate(a, ga)?;
            }
            Op::Conv { input, weight, bias } => {
                let grads = conv::conv3d_backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    self.wants(input),
                )?;
                if let Some(gi) = grads.input {
                    self.accumulate(input, gi)?;
                }
                self.accumulate(weight, grads.weight)?;
                self.accumulate(bias, grads.bias)?;
            }
            Op::MaxPool { input, ref argmax } => {
                let shape = self.value(input).shape().to_vec();
                let gi = conv::maxpool2d_backward(&shape, argmax, g)?;
                self.accumulate(input, gi)?;
            }
            Op::Upsample(a) => {
                let ga = conv::upsample2d_backward(g)?;
                self.accumulate(a, ga)?;
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let gp = Tensor::from_vec(&shape, g.data()[offset..offset + n].to_vec())?;
                        self.accumulate(p, gp)?;
                    }
                    offset += n;
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { slope * gv })
                    .collect();
                let ga = Tensor::from_vec(x.shape(), data)?;
                self.accumulate(a, ga)?;
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                let ga = Tensor::from_vec(y.shape(), data)?;
                self.accumulate(a, ga)?;
            }
            Op::Crop(a) => {
                let in_shape = self.value(a).shape().to_vec();
                let (c, h0, w0, b) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let (h, w) = (g.shape()[1], g.shape()[2]);
                let mut ga = Tensor::zeros(&in_shape)?;
                let d = ga.data_mut();
                for ch in 0..c {
                    for r in 0..h {
                        let dst = ((ch * h0 + r) * w0) * b;
                        let src = ((ch * h + r) * w) * b;
                        d[dst..dst + w * b].copy_from_slice(&g.data()[src..src + w * b]);
                    }
                }
                self.accumulate(a, ga)?;
            }
            Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                self.accumulate(a, g.clone().reshape(&shape)?)?;
            }
        }
        Ok(())
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
