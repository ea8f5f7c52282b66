//! Reconstruction quality metrics: mean per-band PSNR, SSIM and the
//! spectral angle mapper.
//!
//! All metrics assume a peak value of 1. Estimates are used as given,
//! without clipping.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cube::Cube;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
}

impl MetricsReport {
    pub fn compute(reference: &Cube, estimate: &Cube) -> Result<Self> {
        Ok(Self {
            psnr: psnr(reference, estimate)?,
            ssim: ssim(reference, estimate)?,
            sam: sam(reference, estimate)?,
        })
    }

    pub fn csv_header() -> &'static str {
        "psnr,ssim,sam"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", fmt_db(self.psnr), self.ssim, self.sam)
    }
}

/// Formats a dB value, writing `inf` for +∞.
pub fn fmt_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        v.to_string()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DbRepr {
    Num(f64),
    Text(String),
}

pub(crate) fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v == f64::INFINITY {
        s.serialize_str("inf")
    } else {
        Err(serde::ser::Error::custom(format!("cannot serialize dB value {v}")))
    }
}

pub(crate) fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    match DbRepr::deserialize(d)? {
        DbRepr::Num(v) => Ok(v),
        DbRepr::Text(t) if t == "inf" => Ok(f64::INFINITY),
        DbRepr::Text(t) => Err(serde::de::Error::custom(format!("invalid dB value {t:?}"))),
    }
}

pub(crate) fn ser_opt_db<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => ser_db(v, s),
        None => s.serialize_none(),
    }
}

pub(crate) fn de_opt_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    match Option::<DbRepr>::deserialize(d)? {
        None => Ok(None),
        Some(DbRepr::Num(v)) => Ok(Some(v)),
        Some(DbRepr::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
        Some(DbRepr::Text(t)) => Err(serde::de::Error::custom(format!("invalid dB value {t:?}"))),
    }
}

/// Per-band mean squared errors.
fn band_mse(reference: &Cube, estimate: &Cube) -> Result<Vec<f64>> {
    reference.check_same_shape(estimate)?;
    let b = reference.bands();
    let mut acc = vec![0.0; b];
    for (r, e) in reference.data().chunks_exact(b).zip(estimate.data().chunks_exact(b)) {
        for k in 0..b {
            let d = r[k] - e[k];
            acc[k] += d * d;
        }
    }
    let n = (reference.height() * reference.width()) as f64;
    Ok(acc.into_iter().map(|s| s / n).collect())
}

/// Mean over bands of `10·log₁₀(1 / MSE_k)`. Bands with zero error are left
/// out of the mean; identical cubes give +∞.
pub fn psnr(reference: &Cube, estimate: &Cube) -> Result<f64> {
    let per_band: Vec<f64> = band_mse(reference, estimate)?
        .into_iter()
        .filter(|&m| m > 0.0)
        .map(|m| -10.0 * m.log10())
        .collect();
    if per_band.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(per_band.iter().sum::<f64>() / per_band.len() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' Gaussian filtering of an `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = (0..k).map(|t| g[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..k).map(|t| g[t] * rows[(i + t) * wo + j]).sum();
        }
    }
    out
}

fn ssim_band(x: &[f64], y: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = filter_valid(x, h, w, g);
    let mu_y = filter_valid(y, h, w, g);
    let xx = filter_valid(&prod(x, x), h, w, g);
    let yy = filter_valid(&prod(y, y), h, w, g);
    let xy = filter_valid(&prod(x, y), h, w, g);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = xx[i] - mx * mx;
        let syy = yy[i] - my * my;
        let sxy = xy[i] - mx * my;
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2));
    }
    total / mu_x.len() as f64
}

/// Mean over bands of the Gaussian-windowed SSIM index (11×11, σ = 1.5,
/// valid windows only).
pub fn ssim(reference: &Cube, estimate: &Cube) -> Result<f64> {
    reference.check_same_shape(estimate)?;
    let (h, w, b) = reference.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs H, W >= {SSIM_WINDOW}, cube is {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for k in 0..b {
        total += ssim_band(&reference.band(k), &estimate.band(k), h, w, &g);
    }
    Ok(total / b as f64)
}

/// Mean spectral angle in radians over pixels whose spectra have nonzero
/// norm in both cubes.
pub fn sam(reference: &Cube, estimate: &Cube) -> Result<f64> {
    reference.check_same_shape(estimate)?;
    let b = reference.bands();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut ref_nonzero = false;
    for (r, e) in reference.data().chunks_exact(b).zip(estimate.data().chunks_exact(b)) {
        let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ne = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nr > 0.0 {
            ref_nonzero = true;
        }
        if nr == 0.0 || ne == 0.0 {
            continue;
        }
        let dot: f64 = r.iter().zip(e).map(|(p, q)| p * q).sum();
        total += (dot / (nr * ne)).clamp(-1.0, 1.0).acos();
        count += 1;
    }
    if !ref_nonzero {
        return Err(Error::invalid("SAM undefined: every reference spectrum has zero norm"));
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn rand_cube(seed: u64, h: usize, w: usize, b: usize) -> Cube {
        Cube::uniform(&mut Rng::new(seed), h, w, b, 0.0, 1.0).unwrap()
    }

    #[test]
    fn psnr_identity_and_offset() {
        let x = rand_cube(1, 4, 5, 3);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        let z = x.map(|v| v + 0.3);
        assert!((psnr(&x, &z).unwrap() + 20.0 * 0.3f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_skips_exact_bands() {
        let x = rand_cube(2, 3, 3, 2);
        let mut y = x.clone();
        for i in 0..3 {
            for j in 0..3 {
                y.set(i, j, 1, x.at(i, j, 1) + 0.1);
            }
        }
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_loop() {
        for seed in 0..10 {
            let (x, y) = (rand_cube(seed, 5, 4, 6), rand_cube(seed + 100, 5, 4, 6));
            let mut acc = 0.0;
            for k in 0..6 {
                let mut s = 0.0;
                for i in 0..5 {
                    for j in 0..4 {
                        s += (x.at(i, j, k) - y.at(i, j, k)).powi(2);
                    }
                }
                acc += 10.0 * (1.0 / (s / 20.0)).log10();
            }
            assert!((psnr(&x, &y).unwrap() - acc / 6.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch() {
        let (x, y) = (rand_cube(1, 12, 12, 2), rand_cube(1, 12, 12, 3));
        assert!(psnr(&x, &y).is_err());
        assert!(ssim(&x, &y).is_err());
        assert!(sam(&x, &y).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_anticorrelation() {
        let x = rand_cube(3, 16, 14, 3);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = rand_cube(4, 16, 14, 3);
        let (a, b) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!((a - b).abs() < 1e-12);
        assert!((-1.0..1.0).contains(&a));
        assert!(ssim(&x, &x.map(|v| 1.0 - v)).unwrap() < 0.0);
    }

    #[test]
    fn ssim_needs_window() {
        let x = rand_cube(3, 10, 20, 2);
        assert!(ssim(&x, &x).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let (x, y) = (rand_cube(5, 12, 13, 2), rand_cube(6, 12, 13, 2));
        let g = gaussian_window();
        let mut total = 0.0;
        for k in 0..2 {
            let mut band = 0.0;
            let mut n = 0.0;
            for i0 in 0..2 {
                for j0 in 0..3 {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for a in 0..11 {
                        for c in 0..11 {
                            let wgt = g[a] * g[c];
                            let (p, q) = (x.at(i0 + a, j0 + c, k), y.at(i0 + a, j0 + c, k));
                            mx += wgt * p;
                            my += wgt * q;
                            xx += wgt * p * p;
                            yy += wgt * q * q;
                            xy += wgt * p * q;
                        }
                    }
                    let num = (2.0 * mx * my + SSIM_C1) * (2.0 * (xy - mx * my) + SSIM_C2);
                    let den = (mx * mx + my * my + SSIM_C1) * (xx - mx * mx + yy - my * my + SSIM_C2);
                    band += num / den;
                    n += 1.0;
                }
            }
            total += band / n;
        }
        assert!((ssim(&x, &y).unwrap() - total / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sam_basics() {
        let x = rand_cube(7, 4, 4, 5);
        assert!(sam(&x, &x).unwrap().abs() < 1e-7);
        assert!(sam(&x, &x.map(|v| 2.0 * v)).unwrap().abs() < 1e-7);
        let a = Cube::from_fn(2, 2, 2, |_, _, k| if k == 0 { 1.0 } else { 0.0 }).unwrap();
        let b = Cube::from_fn(2, 2, 2, |_, _, k| if k == 1 { 3.0 } else { 0.0 }).unwrap();
        assert!((sam(&a, &b).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn sam_zero_pixels() {
        let z = Cube::zeros(2, 2, 3).unwrap();
        assert!(sam(&z, &z).is_err());
        let mut r = Cube::full(2, 2, 3, 0.5).unwrap();
        for k in 0..3 {
            r.set(0, 0, k, 0.0);
        }
        let mut e = r.clone();
        e.set(1, 1, 0, 0.9);
        let angle = {
            let (p, q) = ([0.5, 0.5, 0.5], [0.9, 0.5, 0.5]);
            let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
            let n = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            (dot / (n(&p) * n(&q))).acos()
        };
        assert!((sam(&r, &e).unwrap() - angle / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_json_round_trip() {
        let x = rand_cube(8, 12, 12, 2);
        let rep = MetricsReport::compute(&x, &x).unwrap();
        let s = serde_json::to_string(&rep).unwrap();
        assert!(s.contains("\"psnr\":\"inf\""));
        let back: MetricsReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back.psnr, f64::INFINITY);
        assert_eq!(back.ssim, rep.ssim);
        let y = rand_cube(9, 12, 12, 2);
        let rep = MetricsReport::compute(&x, &y).unwrap();
        let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        assert_eq!(back, rep);
        assert!(rep.csv_row().split(',').count() == 3);
    }
}
