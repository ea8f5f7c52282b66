//! Mixed-noise simulator: Gaussian, salt-and-pepper impulse, vertical
//! stripes and dead columns.
//!
//! [`corrupt`] applies the components in a fixed order (Gaussian, impulse,
//! stripes, deadlines) so dead columns always read exactly zero. The output
//! is not clipped to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::cube::Cube;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Stripe offsets are drawn uniform in `±STRIPE_AMPLITUDE`.
pub const STRIPE_AMPLITUDE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub gaussian_sigma: f64,
    pub impulse_rate: f64,
    pub stripe_band_fraction: f64,
    pub stripe_count_range: [usize; 2],
    pub deadline_band_fraction: f64,
    pub deadline_count_range: [usize; 2],
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gaussian_sigma: 0.0,
            impulse_rate: 0.0,
            stripe_band_fraction: 0.0,
            stripe_count_range: [0, 0],
            deadline_band_fraction: 0.0,
            deadline_count_range: [0, 0],
        }
    }
}

impl NoiseSpec {
    /// The five benchmark corruption recipes.
    ///
    /// | case | Gaussian σ | impulse p | stripes        | deadlines      |
    /// |------|------------|-----------|----------------|----------------|
    /// | 1    | 0.2        |           |                |                |
    /// | 2    | 0.1        | 0.1       |                |                |
    /// | 3    | 0.1        | 0.1       | 40%, [6, 15]   |                |
    /// | 4    | 0.1        | 0.1       |                | 50%, [6, 10]   |
    /// | 5    | 0.1        | 0.1       | 40%, [6, 15]   | 50%, [6, 10]   |
    pub fn case(id: u8) -> Result<NoiseSpec> {
        let base = NoiseSpec {
            gaussian_sigma: 0.1,
            impulse_rate: 0.1,
            ..Default::default()
        };
        let stripes = |s: NoiseSpec| NoiseSpec {
            stripe_band_fraction: 0.4,
            stripe_count_range: [6, 15],
            ..s
        };
        let deadlines = |s: NoiseSpec| NoiseSpec {
            deadline_band_fraction: 0.5,
            deadline_count_range: [6, 10],
            ..s
        };
        Ok(match id {
            1 => NoiseSpec {
                gaussian_sigma: 0.2,
                ..Default::default()
            },
            2 => base,
            3 => stripes(base),
            4 => deadlines(base),
            5 => deadlines(stripes(base)),
            _ => return Err(Error::invalid(format!("noise case must be 1..=5, got {id}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma.is_finite() && self.gaussian_sigma >= 0.0) {
            return Err(Error::invalid(format!("gaussian sigma must be >= 0, got {}", self.gaussian_sigma)));
        }
        if !(0.0..=1.0).contains(&self.impulse_rate) {
            return Err(Error::invalid(format!("impulse rate must be in [0, 1], got {}", self.impulse_rate)));
        }
        for (name, f) in [
            ("stripe_band_fraction", self.stripe_band_fraction),
            ("deadline_band_fraction", self.deadline_band_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {f}")));
            }
        }
        for (name, [lo, hi]) in [
            ("stripe_count_range", self.stripe_count_range),
            ("deadline_count_range", self.deadline_count_range),
        ] {
            if lo > hi {
                return Err(Error::invalid(format!("{name} is empty: [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Which bands and columns received structured noise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseLog {
    pub impulse_count: usize,
    /// `(band, columns)` per striped band, in selection order.
    pub stripes: Vec<(usize, Vec<usize>)>,
    /// `(band, columns)` per band with dead columns, in selection order.
    pub deadlines: Vec<(usize, Vec<usize>)>,
}

/// Number of bands selected for a band fraction: `⌈fraction · B⌉`.
pub fn selected_band_count(fraction: f64, bands: usize) -> usize {
    // The small slack keeps products like 0.1 · 30 = 3.0000000000000004
    // from rounding up to the next band.
    let n = (fraction * bands as f64 - 1e-9).ceil().max(0.0) as usize;
    n.min(bands)
}

pub fn add_gaussian(x: &Cube, sigma: f64, rng: &mut Rng) -> Result<Cube> {
    let noise = Tensor::gaussian(rng, x.shape(), 0.0, sigma)?;
    Cube::new(x.tensor().add(&noise)?)
}

pub fn add_impulse(x: &Cube, p: f64, rng: &mut Rng) -> Result<Cube> {
    Ok(impulse_logged(x, p, rng)?.0)
}

fn impulse_logged(x: &Cube, p: f64, rng: &mut Rng) -> Result<(Cube, usize)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("impulse rate must be in [0, 1], got {p}")));
    }
    let mut y = x.clone();
    if p == 0.0 {
        return Ok((y, 0));
    }
    let mut count = 0;
    for v in y.data_mut() {
        if rng.bernoulli(p) {
            *v = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
            count += 1;
        }
    }
    Ok((y, count))
}

fn column_noise(
    x: &Cube,
    fraction: f64,
    range: [usize; 2],
    rng: &mut Rng,
    mut apply: impl FnMut(&mut Cube, usize, usize, &mut Rng),
) -> Result<(Cube, Vec<(usize, Vec<usize>)>)> {
    let (_, w, b) = x.dims();
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("band fraction must be in [0, 1], got {fraction}")));
    }
    let [lo, hi] = range;
    if lo > hi {
        return Err(Error::invalid(format!("column count range is empty: [{lo}, {hi}]")));
    }
    if hi > w {
        return Err(Error::invalid(format!(
            "column count range [{lo}, {hi}] exceeds cube width {w}"
        )));
    }
    let mut y = x.clone();
    let mut log = Vec::new();
    let nb = selected_band_count(fraction, b);
    if nb == 0 {
        return Ok((y, log));
    }
    for band in rng.choose_distinct(b, nb) {
        let count = rng.int_inclusive(lo, hi);
        let cols = rng.choose_distinct(w, count);
        for &col in &cols {
            apply(&mut y, band, col, rng);
        }
        log.push((band, cols));
    }
    Ok((y, log))
}

/// Adds a constant offset, uniform in `±0.25`, down each selected column.
pub fn add_stripes(x: &Cube, band_fraction: f64, count_range: [usize; 2], rng: &mut Rng) -> Result<Cube> {
    Ok(stripes_logged(x, band_fraction, count_range, rng)?.0)
}

fn stripes_logged(
    x: &Cube,
    band_fraction: f64,
    count_range: [usize; 2],
    rng: &mut Rng,
) -> Result<(Cube, Vec<(usize, Vec<usize>)>)> {
    column_noise(x, band_fraction, count_range, rng, |y, band, col, rng| {
        let offset = rng.uniform(-STRIPE_AMPLITUDE, STRIPE_AMPLITUDE);
        for i in 0..y.height() {
            let v = y.at(i, col, band);
            y.set(i, col, band, v + offset);
        }
    })
}

/// Zeroes every selected column.
pub fn add_deadlines(x: &Cube, band_fraction: f64, count_range: [usize; 2], rng: &mut Rng) -> Result<Cube> {
    Ok(deadlines_logged(x, band_fraction, count_range, rng)?.0)
}

fn deadlines_logged(
    x: &Cube,
    band_fraction: f64,
    count_range: [usize; 2],
    rng: &mut Rng,
) -> Result<(Cube, Vec<(usize, Vec<usize>)>)> {
    column_noise(x, band_fraction, count_range, rng, |y, band, col, _| {
        for i in 0..y.height() {
            y.set(i, col, band, 0.0);
        }
    })
}

pub fn corrupt(x: &Cube, spec: &NoiseSpec, rng: &mut Rng) -> Result<Cube> {
    Ok(corrupt_logged(x, spec, rng)?.0)
}

/// [`corrupt`], also reporting where structured noise landed.
pub fn corrupt_logged(x: &Cube, spec: &NoiseSpec, rng: &mut Rng) -> Result<(Cube, NoiseLog)> {
    spec.validate()?;
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!(
            "clean cube must lie in [0, 1] before corruption, found {v}"
        )));
    }
    let y = add_gaussian(x, spec.gaussian_sigma, rng)?;
    let (y, impulse_count) = impulse_logged(&y, spec.impulse_rate, rng)?;
    let (y, stripes) = stripes_logged(&y, spec.stripe_band_fraction, spec.stripe_count_range, rng)?;
    let (y, deadlines) = deadlines_logged(&y, spec.deadline_band_fraction, spec.deadline_count_range, rng)?;
    Ok((
        y,
        NoiseLog {
            impulse_count,
            stripes,
            deadlines,
        },
    ))
}

/// Synthetic clean cube: a background and three rectangles, each a
/// distinct material whose spectrum ramps linearly across the bands.
/// Values stay inside `[0.1, 0.9]`.
pub fn phantom(h: usize, w: usize, b: usize, rng: &mut Rng) -> Result<Cube> {
    let mut ramps = [(0.0, 0.0); 4];
    for r in &mut ramps {
        *r = (rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9));
    }
    let rects = [
        (0.1, 0.1, 0.5, 0.6),
        (0.55, 0.2, 0.9, 0.5),
        (0.3, 0.65, 0.8, 0.95),
    ];
    let material = |i: usize, j: usize| {
        let (y, x) = ((i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64);
        rects
            .iter()
            .rposition(|&(y0, x0, y1, x1)| y >= y0 && y < y1 && x >= x0 && x < x1)
            .map_or(0, |m| m + 1)
    };
    Cube::from_fn(h, w, b, |i, j, k| {
        let (lo, hi) = ramps[material(i, j)];
        let t = if b > 1 { k as f64 / (b - 1) as f64 } else { 0.0 };
        lo + (hi - lo) * t
    })
}
