//! Data fidelity plus hybrid total-variation regularisation.
//!
//! `loss(X) = mse(X, Y) + λ · (α₁ · TV(X) + α₂ · SSTV(X))` where
//!
//! * `TV(X)   = ‖D_v X‖₁ + ‖D_h X‖₁`
//! * `SSTV(X) = ‖D_v D_b X‖₁ + ‖D_h D_b X‖₁`
//!
//! with forward differences `D_v`, `D_h`, `D_b` along the vertical,
//! horizontal and band axes. Both penalties are anisotropic and
//! unnormalised.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cube::Cube;
use crate::error::{Error, Result};

pub const AXIS_V: usize = 0;
pub const AXIS_H: usize = 1;
pub const AXIS_B: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl LossWeights {
    pub const DEFAULT_ALPHA1: f64 = 0.01;
    pub const DEFAULT_ALPHA2: f64 = 1.0;

    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            alpha1: Self::DEFAULT_ALPHA1,
            alpha2: Self::DEFAULT_ALPHA2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn need_extent(x: &Cube, axes: &[usize], what: &str) -> Result<()> {
    for &a in axes {
        if x.shape()[a] < 2 {
            return Err(Error::invalid(format!(
                "{what} needs extent >= 2 along axis {a}, cube is {:?}",
                x.shape()
            )));
        }
    }
    Ok(())
}

/// `(1/N) Σ (aᵢ − bᵢ)²` over all `N = H·W·B` elements.
pub fn mse(a: &Cube, b: &Cube) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.tensor().sub(b.tensor())?.sum_sq() / a.len() as f64)
}

pub fn tv(x: &Cube) -> Result<f64> {
    need_extent(x, &[AXIS_V, AXIS_H], "TV")?;
    let t = x.tensor();
    Ok(t.slice_shift_diff(AXIS_V)?.sum_abs() + t.slice_shift_diff(AXIS_H)?.sum_abs())
}

pub fn sstv(x: &Cube) -> Result<f64> {
    need_extent(x, &[AXIS_V, AXIS_H, AXIS_B], "SSTV")?;
    let db = x.tensor().slice_shift_diff(AXIS_B)?;
    Ok(db.slice_shift_diff(AXIS_V)?.sum_abs() + db.slice_shift_diff(AXIS_H)?.sum_abs())
}

/// Eager value of [`total_loss`].
pub fn total_loss_value(out: &Cube, y: &Cube, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let fit = mse(out, y)?;
    if w.lambda == 0.0 {
        return Ok(fit);
    }
    let mut reg = 0.0;
    if w.alpha1 != 0.0 {
        reg += w.lambda * w.alpha1 * tv(out)?;
    }
    if w.alpha2 != 0.0 {
        reg += w.lambda * w.alpha2 * sstv(out)?;
    }
    Ok(fit + reg)
}

fn shape3(tape: &Tape, v: Var) -> Result<[usize; 3]> {
    match *tape.value(v).shape() {
        [h, w, b] => Ok([h, w, b]),
        ref s => Err(Error::invalid(format!("expected an [H, W, B] node, got {s:?}"))),
    }
}

pub fn tv_tracked(tape: &mut Tape, x: Var) -> Result<Var> {
    let [h, w, _] = shape3(tape, x)?;
    if h < 2 || w < 2 {
        return Err(Error::invalid("TV needs H, W >= 2"));
    }
    let dv = tape.diff(x, AXIS_V)?;
    let dh = tape.diff(x, AXIS_H)?;
    let a = tape.sum_abs(dv);
    let b = tape.sum_abs(dh);
    tape.add(a, b)
}

pub fn sstv_tracked(tape: &mut Tape, x: Var) -> Result<Var> {
    let [h, w, b] = shape3(tape, x)?;
    if h < 2 || w < 2 || b < 2 {
        return Err(Error::invalid("SSTV needs H, W, B >= 2"));
    }
    let db = tape.diff(x, AXIS_B)?;
    let dv = tape.diff(db, AXIS_V)?;
    let dh = tape.diff(db, AXIS_H)?;
    let a = tape.sum_abs(dv);
    let c = tape.sum_abs(dh);
    tape.add(a, c)
}

/// Records `mse(out, y) + λ(α₁ TV(out) + α₂ SSTV(out))` on the tape.
/// With `λ = 0` only the MSE term is recorded.
pub fn total_loss(tape: &mut Tape, out: Var, y: Var, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let shape = shape3(tape, out)?;
    if tape.value(y).shape() != shape {
        return Err(Error::mismatch(tape.value(y).shape(), &shape));
    }
    let n = tape.value(out).len() as f64;
    let r = tape.sub(out, y)?;
    let sq = tape.sum_sq(r);
    let mut loss = tape.scale(sq, 1.0 / n);
    if w.lambda == 0.0 {
        return Ok(loss);
    }
    if w.alpha1 != 0.0 {
        let t = tv_tracked(tape, out)?;
        let t = tape.scale(t, w.lambda * w.alpha1);
        loss = tape.add(loss, t)?;
    }
    if w.alpha2 != 0.0 {
        let s = sstv_tracked(tape, out)?;
        let s = tape.scale(s, w.lambda * w.alpha2);
        loss = tape.add(loss, s)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn loop_tv(x: &Cube) -> f64 {
        let (h, w, b) = x.dims();
        let mut s = 0.0;
        for i in 0..h {
            for j in 0..w {
                for k in 0..b {
                    if i + 1 < h {
                        s += (x.at(i + 1, j, k) - x.at(i, j, k)).abs();
                    }
                    if j + 1 < w {
                        s += (x.at(i, j + 1, k) - x.at(i, j, k)).abs();
                    }
                }
            }
        }
        s
    }

    fn loop_sstv(x: &Cube) -> f64 {
        let (h, w, b) = x.dims();
        let db = |i: usize, j: usize, k: usize| x.at(i, j, k + 1) - x.at(i, j, k);
        let mut s = 0.0;
        for i in 0..h {
            for j in 0..w {
                for k in 0..b - 1 {
                    if i + 1 < h {
                        s += (db(i + 1, j, k) - db(i, j, k)).abs();
                    }
                    if j + 1 < w {
                        s += (db(i, j + 1, k) - db(i, j, k)).abs();
                    }
                }
            }
        }
        s
    }

    #[test]
    fn mse_basics() {
        let mut rng = Rng::new(1);
        let x = Cube::uniform(&mut rng, 3, 4, 5, 0.0, 1.0).unwrap();
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        let a = Cube::full(2, 3, 4, 0.5).unwrap();
        let b = Cube::zeros(2, 3, 4).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 0.25);
        assert!(mse(&a, &Cube::zeros(2, 3, 5).unwrap()).is_err());
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv(&Cube::full(4, 4, 3, 0.3).unwrap()).unwrap(), 0.0);
        let x = Cube::from_vec(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(tv(&x).unwrap(), 2.0);
        assert!(tv(&Cube::zeros(1, 4, 2).unwrap()).is_err());
    }

    #[test]
    fn sstv_annihilates_band_constant_and_space_constant() {
        let mut rng = Rng::new(2);
        let img = Cube::uniform(&mut rng, 5, 6, 1, 0.0, 1.0).unwrap();
        let bandconst = Cube::from_fn(5, 6, 4, |i, j, _| img.at(i, j, 0)).unwrap();
        assert_eq!(sstv(&bandconst).unwrap(), 0.0);
        let spaceconst = Cube::from_fn(5, 6, 4, |_, _, k| k as f64 * 0.2).unwrap();
        assert_eq!(sstv(&spaceconst).unwrap(), 0.0);
        assert!(sstv(&Cube::zeros(4, 4, 1).unwrap()).is_err());
    }

    #[test]
    fn against_loop_oracles() {
        let mut rng = Rng::new(3);
        for _ in 0..5 {
            let x = Cube::uniform(&mut rng, 5, 6, 4, -1.0, 1.0).unwrap();
            let y = Cube::uniform(&mut rng, 5, 6, 4, -1.0, 1.0).unwrap();
            assert!((tv(&x).unwrap() - loop_tv(&x)).abs() < 1e-12);
            assert!((sstv(&x).unwrap() - loop_sstv(&x)).abs() < 1e-12);
            let mut m = 0.0;
            for (a, b) in x.data().iter().zip(y.data()) {
                m += (a - b) * (a - b);
            }
            assert!((mse(&x, &y).unwrap() - m / 120.0).abs() < 1e-12);
        }
    }

    fn tracked_value(out: &Cube, y: &Cube, w: &LossWeights) -> f64 {
        let mut tape = Tape::new();
        let o = tape.leaf(out.tensor().clone(), true);
        let t = tape.constant(y.tensor().clone());
        let l = total_loss(&mut tape, o, t, w).unwrap();
        tape.scalar_value(l)
    }

    #[test]
    fn tracked_equals_eager() {
        let mut rng = Rng::new(4);
        let x = Cube::uniform(&mut rng, 5, 6, 4, 0.0, 1.0).unwrap();
        let y = Cube::uniform(&mut rng, 5, 6, 4, 0.0, 1.0).unwrap();
        let w = LossWeights::new(0.7);
        let a = tracked_value(&x, &y, &w);
        let b = total_loss_value(&x, &y, &w).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_plain_mse() {
        let mut rng = Rng::new(5);
        let x = Cube::uniform(&mut rng, 4, 4, 3, 0.0, 1.0).unwrap();
        let y = Cube::uniform(&mut rng, 4, 4, 3, 0.0, 1.0).unwrap();
        let m = mse(&x, &y).unwrap();
        for (a1, a2) in [(0.01, 1.0), (5.0, 0.0), (0.0, 3.0)] {
            let w = LossWeights { lambda: 0.0, alpha1: a1, alpha2: a2 };
            assert_eq!(total_loss_value(&x, &y, &w).unwrap(), m);
            assert!((tracked_value(&x, &y, &w) - m).abs() < 1e-15);
        }
        let c = Cube::full(4, 4, 3, 0.4).unwrap();
        assert_eq!(total_loss_value(&c, &c, &LossWeights::new(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_grad_matches_finite_differences() {
        let mut rng = Rng::new(6);
        let x = Cube::uniform(&mut rng, 4, 5, 3, 0.0, 1.0).unwrap();
        let y = Cube::uniform(&mut rng, 4, 5, 3, 0.0, 1.0).unwrap();
        let w = LossWeights { lambda: 0.05, alpha1: 0.3, alpha2: 1.0 };
        let mut tape = Tape::new();
        let o = tape.leaf(x.tensor().clone(), true);
        let t = tape.constant(y.tensor().clone());
        let l = total_loss(&mut tape, o, t, &w).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(o).unwrap().clone();
        let h = 1e-6;
        for e in 0..x.len() {
            let mut up = x.clone();
            up.data_mut()[e] += h;
            let mut dn = x.clone();
            dn.data_mut()[e] -= h;
            let fd = (total_loss_value(&up, &y, &w).unwrap() - total_loss_value(&dn, &y, &w).unwrap()) / (2.0 * h);
            assert!((g.data()[e] - fd).abs() <= 1e-3 * fd.abs().max(1e-6), "{e}: {} vs {fd}", g.data()[e]);
        }
    }

    mod props {
        use super::*;
        use crate::tensor::Rng;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn invariances(seed in any::<u64>(), c in -3.0f64..3.0, shift in -2.0f64..2.0) {
                let mut rng = Rng::new(seed);
                let x = Cube::uniform(&mut rng, 4, 5, 3, -1.0, 1.0).unwrap();
                let y = Cube::uniform(&mut rng, 4, 5, 3, -1.0, 1.0).unwrap();
                let (tv0, sstv0, mse0) = (tv(&x).unwrap(), sstv(&x).unwrap(), mse(&x, &y).unwrap());
                prop_assert!(tv0 >= 0.0 && sstv0 >= 0.0 && mse0 >= 0.0);
                prop_assert!(total_loss_value(&x, &y, &LossWeights::new(0.3)).unwrap() >= 0.0);

                let shifted = x.map(|v| v + shift);
                prop_assert!((tv(&shifted).unwrap() - tv0).abs() < 1e-9);
                prop_assert!((sstv(&shifted).unwrap() - sstv0).abs() < 1e-9);

                let img = Cube::uniform(&mut rng, 4, 5, 1, -1.0, 1.0).unwrap();
                let plus_img = Cube::from_fn(4, 5, 3, |i, j, k| x.at(i, j, k) + img.at(i, j, 0)).unwrap();
                prop_assert!((sstv(&plus_img).unwrap() - sstv0).abs() < 1e-9);

                let (xs, ys) = (x.map(|v| c * v), y.map(|v| c * v));
                prop_assert!((tv(&xs).unwrap() - c.abs() * tv0).abs() < 1e-9);
                prop_assert!((sstv(&xs).unwrap() - c.abs() * sstv0).abs() < 1e-9);
                prop_assert!((mse(&xs, &ys).unwrap() - c * c * mse0).abs() < 1e-9);
            }
        }
    }
}
