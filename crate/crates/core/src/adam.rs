//! ADAM with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::net::ParamSet;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments shaped like every parameter in `params`.
    pub fn new(params: &ParamSet, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros()?,
            v: zeros()?,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }

    /// One update of every parameter from its stored gradient. Gradients are
    /// left in place; the caller zeroes them.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, registry has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.as_ref().expect("checked above");
            if g.shape() != p.value.shape() {
                return Err(Error::mismatch(g.shape(), p.value.shape()));
            }
            let theta = p.value.data_mut();
            for (((th, &gi), mi), vi) in theta
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *th -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
