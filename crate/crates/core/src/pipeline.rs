//! The fitting loop: forward, loss, backward and an ADAM step per
//! iteration, stopped by a relative-change test on the network output.
//!
//! The stopping statistic compares outputs `check_interval` iterations
//! apart. Output `O_1` seeds the comparison; at every iteration
//! `k ≡ 0 (mod check_interval)` the loop computes
//! `‖O_k − O_prev‖₂ / ‖O_prev‖₂` against the previously checked output,
//! stops if it is below `r`, and otherwise makes `O_k` the new reference.
//! The loop never runs past `k_max`.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::autodiff::Tape;
use crate::cube::Cube;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossWeights};
use crate::net::{Network, NetworkConfig};
use crate::quality::{self, de_opt_db, ser_opt_db};
use crate::tensor::Rng;

const STREAM_WEIGHTS: u64 = 1;
const STREAM_INPUT: u64 = 2;
/// Learning rate used by runs unless configured otherwise.
pub const DEFAULT_RUN_LR: f64 = 0.001;
/// Amplitude of the fixed uniform network input.
pub const INPUT_AMPLITUDE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopConfig {
    pub r: f64,
    pub k_max: usize,
    pub check_interval: usize,
}

impl Default for StopConfig {
    fn default() -> Self {
        Self {
            r: 0.01,
            k_max: 7000,
            check_interval: 100,
        }
    }
}

impl StopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0) {
            return Err(Error::invalid(format!("RelErr tolerance must be > 0, got {}", self.r)));
        }
        if self.k_max == 0 {
            return Err(Error::invalid("k_max must be >= 1"));
        }
        if self.check_interval == 0 {
            return Err(Error::invalid("check_interval must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Tolerance,
    MaxIterations,
}

/// `‖next − prev‖₂ / ‖prev‖₂`.
pub fn rel_err(next: &Cube, prev: &Cube) -> Result<f64> {
    next.check_same_shape(prev)?;
    let denom = prev.tensor().sum_sq().sqrt();
    if denom == 0.0 {
        return Err(Error::invalid("RelErr undefined for a zero-norm previous output"));
    }
    Ok(next.tensor().sub(prev.tensor())?.sum_sq().sqrt() / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelErrCheck {
    pub iteration: usize,
    pub rel_err: f64,
}

/// Applies the stopping rule to a stream of outputs.
#[derive(Debug, Clone)]
pub struct StopMonitor {
    cfg: StopConfig,
    reference: Option<Cube>,
    checks: Vec<RelErrCheck>,
}

impl StopMonitor {
    pub fn new(cfg: StopConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            reference: None,
            checks: Vec::new(),
        })
    }

    /// Feeds output `O_k` (iterations count from 1). Returns the reason to
    /// stop after iteration `k`, if any.
    pub fn observe(&mut self, k: usize, output: &Cube) -> Result<Option<StopReason>> {
        let checked = k % self.cfg.check_interval == 0;
        if checked || self.reference.is_none() {
            if let Some(prev) = &self.reference {
                let e = rel_err(output, prev)?;
                self.checks.push(RelErrCheck { iteration: k, rel_err: e });
                if e < self.cfg.r {
                    return Ok(Some(StopReason::Tolerance));
                }
            }
            self.reference = Some(output.clone());
        }
        if k >= self.cfg.k_max {
            return Ok(Some(StopReason::MaxIterations));
        }
        Ok(None)
    }

    pub fn checks(&self) -> &[RelErrCheck] {
        &self.checks
    }

    pub fn into_checks(self) -> Vec<RelErrCheck> {
        self.checks
    }
}

/// Drives `step(k)` for `k = 1, 2, …` until the stopping rule fires.
/// `step` returns the output `O_k`. Returns the iteration count, the
/// reason and the RelErr checks made.
pub fn iterate(
    stop: &StopConfig,
    mut step: impl FnMut(usize) -> Result<Cube>,
) -> Result<(usize, StopReason, Vec<RelErrCheck>)> {
    let mut monitor = StopMonitor::new(*stop)?;
    let mut k = 0;
    loop {
        k += 1;
        let out = step(k)?;
        if let Some(reason) = monitor.observe(k, &out)? {
            return Ok((k, reason, monitor.into_checks()));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    /// Loss weights with `lambda` as an absolute value.
    pub weights: LossWeights,
    pub stop: StopConfig,
    pub lr: f64,
    pub seed: u64,
    /// Clean cube for PSNR-per-iteration logging.
    pub trace: Option<Cube>,
}

impl RunConfig {
    /// Defaults with `λ = lambda_over_n / N`, `N = H·W·B` of `dims`.
    pub fn with_lambda_over_n(lambda_over_n: f64, dims: (usize, usize, usize), seed: u64) -> Self {
        let n = (dims.0 * dims.1 * dims.2) as f64;
        Self {
            network: NetworkConfig::default(),
            weights: LossWeights::new(lambda_over_n / n),
            stop: StopConfig::default(),
            lr: DEFAULT_RUN_LR,
            seed,
            trace: None,
        }
    }

    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        self.network.validate()?;
        self.weights.validate()?;
        self.stop.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if let Some(t) = &self.trace {
            if t.dims() != dims {
                let (h, w, b) = dims;
                return Err(Error::mismatch(t.shape(), &[h, w, b]));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestIterate {
    pub iteration: usize,
    pub psnr: f64,
    pub output: Cube,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub rel_err: Option<f64>,
    #[serde(serialize_with = "ser_opt_db", deserialize_with = "de_opt_db")]
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
    pub checks: Vec<RelErrCheck>,
    pub wall_time: Duration,
    pub output: Cube,
    pub best: Option<BestIterate>,
    pub param_count: usize,
}

impl PartialEq for RunReport {
    /// Equality ignores wall time.
    fn eq(&self, other: &Self) -> bool {
        self.stop_reason == other.stop_reason
            && self.iterations == other.iterations
            && self.trace == other.trace
            && self.checks == other.checks
            && self.output == other.output
            && self.best == other.best
            && self.param_count == other.param_count
    }
}

impl RunReport {
    pub fn losses(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.loss).collect()
    }

    pub fn psnrs(&self) -> Option<Vec<f64>> {
        self.trace.iter().map(|r| r.psnr).collect()
    }

    pub fn final_psnr(&self) -> Option<f64> {
        self.trace.last().and_then(|r| r.psnr)
    }

    /// CSV with header `iteration,loss,rel_err,psnr`; absent values are
    /// empty fields.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,loss,rel_err,psnr\n");
        for r in &self.trace {
            let rel = r.rel_err.map(|v| v.to_string()).unwrap_or_default();
            let psnr = r.psnr.map(quality::fmt_db).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.iteration, r.loss, rel, psnr);
        }
        s
    }

    /// Serializable summary. Wall time is left out so equal runs give
    /// byte-identical records.
    pub fn summary(&self, cfg: &RunConfig) -> ReportRecord {
        ReportRecord {
            stop_reason: self.stop_reason,
            iterations: self.iterations,
            final_loss: self.trace.last().map(|r| r.loss).unwrap_or(f64::NAN),
            final_psnr: self.final_psnr(),
            best_iteration: self.best.as_ref().map(|b| b.iteration),
            best_psnr: self.best.as_ref().map(|b| b.psnr),
            checks: self.checks.clone(),
            param_count: self.param_count,
            seed: cfg.seed,
            lr: cfg.lr,
            weights: cfg.weights,
            stop: cfg.stop,
            network: cfg.network.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRecord {
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub final_loss: f64,
    #[serde(serialize_with = "ser_opt_db", deserialize_with = "de_opt_db")]
    pub final_psnr: Option<f64>,
    pub best_iteration: Option<usize>,
    #[serde(serialize_with = "ser_opt_db", deserialize_with = "de_opt_db")]
    pub best_psnr: Option<f64>,
    pub checks: Vec<RelErrCheck>,
    pub param_count: usize,
    pub seed: u64,
    pub lr: f64,
    pub weights: LossWeights,
    pub stop: StopConfig,
    pub network: NetworkConfig,
}

/// The fixed network input for `seed`.
pub fn network_input(seed: u64, dims: (usize, usize, usize)) -> Result<Cube> {
    let mut rng = Rng::new(seed).substream(STREAM_INPUT);
    Cube::uniform(&mut rng, dims.0, dims.1, dims.2, 0.0, INPUT_AMPLITUDE)
}

/// Fits the network to `y` and returns the last output with its trace.
/// The output of iteration `k` is the forward pass whose loss drives
/// update `k`.
pub fn run(y: &Cube, cfg: &RunConfig) -> Result<RunReport> {
    let started = Instant::now();
    let dims = y.dims();
    cfg.validate(dims)?;
    if !y.is_finite() {
        return Err(Error::invalid("noisy cube contains non-finite values"));
    }
    let mut init_rng = Rng::new(cfg.seed).substream(STREAM_WEIGHTS);
    let mut net = Network::build(&cfg.network, dims, &mut init_rng)?;
    let input = net.input_tensor(&network_input(cfg.seed, dims)?)?;
    let mut opt = AdamState::new(&net.params, cfg.lr)?;
    let mut trace = Vec::new();
    let mut best: Option<BestIterate> = None;
    let mut last = None;

    let (iterations, stop_reason, checks) = iterate(&cfg.stop, |k| {
        let mut tape = Tape::new();
        let vars = net.params.track(&mut tape);
        let z = tape.constant(input.clone());
        let target = tape.constant(y.tensor().clone());
        let out = net.forward_tracked(&mut tape, &vars, z)?;
        let loss = total_loss(&mut tape, out, target, &cfg.weights)?;
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: k, value });
        }
        tape.backward(loss)?;
        net.params.collect_grads(&mut tape, &vars)?;
        opt.step(&mut net.params)?;
        net.params.zero_grads();

        let output = Cube::new(tape.value(out).clone())?;
        let psnr = match &cfg.trace {
            Some(clean) => Some(quality::psnr(clean, &output)?),
            None => None,
        };
        if let Some(p) = psnr {
            if best.as_ref().is_none_or(|b| p > b.psnr) {
                best = Some(BestIterate {
                    iteration: k,
                    psnr: p,
                    output: output.clone(),
                });
            }
        }
        trace.push(TraceRow {
            iteration: k,
            loss: value,
            rel_err: None,
            psnr,
        });
        last = Some(output.clone());
        Ok(output)
    })?;

    for c in &checks {
        trace[c.iteration - 1].rel_err = Some(c.rel_err);
    }
    Ok(RunReport {
        stop_reason,
        iterations,
        trace,
        checks,
        wall_time: started.elapsed(),
        output: last.expect("at least one iteration"),
        best,
        param_count: net.params.scalar_count(),
    })
}

/// [`run`] with the regulariser switched off (pure MSE fitting).
pub fn run_dip_baseline(y: &Cube, cfg: &RunConfig) -> Result<RunReport> {
    let mut cfg = cfg.clone();
    cfg.weights.lambda = 0.0;
    run(y, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::with_lambda_over_n(0.4, (8, 8, 4), seed);
        cfg.network = NetworkConfig {
            depth: 1,
            channels: vec![4],
            ..Default::default()
        };
        cfg
    }

    fn noisy(seed: u64) -> Cube {
        Cube::uniform(&mut Rng::new(seed), 8, 8, 4, 0.0, 1.0).unwrap()
    }

    #[test]
    fn rel_err_basics() {
        let x = noisy(1);
        assert_eq!(rel_err(&x, &x).unwrap(), 0.0);
        assert!((rel_err(&x.map(|v| 2.0 * v), &x).unwrap() - 1.0).abs() < 1e-15);
        assert!(rel_err(&x, &Cube::zeros(8, 8, 4).unwrap()).is_err());
        assert!(rel_err(&x, &Cube::zeros(8, 8, 3).unwrap()).is_err());
    }

    #[test]
    fn rel_err_matches_loop() {
        for seed in 0..5 {
            let (a, b) = (noisy(seed), noisy(seed + 50));
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..8 {
                for j in 0..8 {
                    for k in 0..4 {
                        num += (a.at(i, j, k) - b.at(i, j, k)).powi(2);
                        den += b.at(i, j, k).powi(2);
                    }
                }
            }
            assert!((rel_err(&a, &b).unwrap() - (num / den).sqrt()).abs() < 1e-12);
        }
    }

    fn scripted(values: &[f64]) -> impl FnMut(usize) -> Result<Cube> + '_ {
        // O_k = c_k · 1 with c_1 = 1, so RelErr between checks is |c_k/c_prev − 1|.
        move |k| Cube::full(2, 2, 2, values[k - 1])
    }

    #[test]
    fn stops_at_first_small_check() {
        let mut seq = vec![1.0; 10];
        for k in 0..10 {
            seq[k] = 1.0 + 0.5 * (k as f64);
        }
        seq[5] = seq[3] * 1.005;
        let stop = StopConfig {
            r: 0.01,
            k_max: 10,
            check_interval: 2,
        };
        let (k, reason, checks) = iterate(&stop, scripted(&seq)).unwrap();
        assert_eq!((k, reason), (6, StopReason::Tolerance));
        assert_eq!(checks.iter().map(|c| c.iteration).collect::<Vec<_>>(), vec![2, 4, 6]);
    }

    #[test]
    fn stops_at_k_max() {
        let seq: Vec<f64> = (0..20).map(|k| 1.0 + k as f64).collect();
        let stop = StopConfig {
            r: 0.01,
            k_max: 7,
            check_interval: 3,
        };
        let (k, reason, _) = iterate(&stop, scripted(&seq)).unwrap();
        assert_eq!((k, reason), (7, StopReason::MaxIterations));
    }

    #[test]
    fn tolerance_wins_at_k_max() {
        let seq = vec![1.0; 4];
        let stop = StopConfig {
            r: 0.01,
            k_max: 4,
            check_interval: 4,
        };
        assert_eq!(iterate(&stop, scripted(&seq)).unwrap().1, StopReason::Tolerance);
    }

    #[test]
    fn invalid_stop_config() {
        for stop in [
            StopConfig { r: 0.0, ..Default::default() },
            StopConfig { k_max: 0, ..Default::default() },
            StopConfig { check_interval: 0, ..Default::default() },
        ] {
            assert!(stop.validate().is_err());
        }
    }

    #[test]
    fn single_iteration() {
        let mut cfg = tiny_cfg(1);
        cfg.stop.k_max = 1;
        let rep = run(&noisy(2), &cfg).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.stop_reason, StopReason::MaxIterations);
        assert_eq!(rep.trace.len(), 1);
        assert!(rep.trace[0].loss.is_finite());
    }

    #[test]
    fn huge_tolerance_stops_at_first_check() {
        let mut cfg = tiny_cfg(1);
        cfg.stop = StopConfig {
            r: 1e9,
            k_max: 50,
            check_interval: 5,
        };
        let rep = run(&noisy(2), &cfg).unwrap();
        assert_eq!((rep.iterations, rep.stop_reason), (5, StopReason::Tolerance));
        assert_eq!(rep.trace[4].rel_err, Some(rep.checks[0].rel_err));
    }

    #[test]
    fn deterministic_and_baseline_matches_zero_lambda() {
        let mut cfg = tiny_cfg(3);
        cfg.stop.k_max = 6;
        cfg.trace = Some(noisy(9));
        let y = noisy(4);
        let a = run(&y, &cfg).unwrap();
        let b = run(&y, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace_csv(), b.trace_csv());

        let base = run_dip_baseline(&y, &cfg).unwrap();
        let mut zero = cfg.clone();
        zero.weights.lambda = 0.0;
        assert_eq!(base, run(&y, &zero).unwrap());
        assert_ne!(base.losses(), a.losses());
    }

    #[test]
    fn best_iterate_is_max_of_trace() {
        let mut cfg = tiny_cfg(5);
        cfg.stop.k_max = 8;
        cfg.trace = Some(noisy(11));
        let rep = run(&noisy(12), &cfg).unwrap();
        let psnrs = rep.psnrs().unwrap();
        let best = rep.best.as_ref().unwrap();
        let max = psnrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.psnr, max);
        assert_eq!(psnrs[best.iteration - 1], max);
        assert_eq!(quality::psnr(cfg.trace.as_ref().unwrap(), &best.output).unwrap(), max);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut cfg = tiny_cfg(1);
        cfg.trace = Some(Cube::zeros(8, 8, 3).unwrap());
        assert!(run(&noisy(1), &cfg).is_err());
        let cfg = tiny_cfg(1);
        let mut y = noisy(1);
        y.set(0, 0, 0, f64::NAN);
        assert!(run(&y, &cfg).is_err());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut cfg = tiny_cfg(1);
        cfg.weights.lambda = f64::MAX;
        cfg.weights.alpha1 = f64::MAX;
        match run(&noisy(1), &cfg) {
            Err(Error::NonFiniteLoss { iteration, value }) => {
                assert_eq!(iteration, 1);
                assert!(!value.is_finite());
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn record_round_trip() {
        let mut cfg = tiny_cfg(2);
        cfg.stop.k_max = 3;
        cfg.trace = Some(noisy(3));
        let rep = run(&noisy(4), &cfg).unwrap();
        let rec = rep.summary(&cfg);
        let json = serde_json::to_string_pretty(&rec).unwrap();
        let back: ReportRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        assert_eq!(rep.trace_csv().lines().count(), 4);
    }
}
