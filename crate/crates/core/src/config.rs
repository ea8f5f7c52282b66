//! JSON run files.
//!
//! A run file holds everything a denoising run needs apart from the cube
//! itself. Unknown keys are rejected and missing keys take their defaults;
//! [`RunFile::save`] always writes every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::net::NetworkConfig;
use crate::noise::NoiseSpec;
use crate::pipeline::{RunConfig, StopConfig, DEFAULT_RUN_LR};
use crate::Cube;

/// `λ·N` for each noise case: 0.2, 0.4, 1, 0.4, 1.
pub fn case_lambda_over_n(case: u8) -> Result<f64> {
    match case {
        1 => Ok(0.2),
        2 | 4 => Ok(0.4),
        3 | 5 => Ok(1.0),
        _ => Err(Error::invalid(format!("noise case must be 1..=5, got {case}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub network: NetworkConfig,
    /// `λ = lambda_over_n / (H·W·B)`.
    pub lambda_over_n: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub lr: f64,
    pub stop: StopConfig,
    pub seed: u64,
    /// Noise case preset; overrides `lambda_over_n` when set through
    /// [`RunFile::for_case`].
    pub case: Option<u8>,
    /// Explicit noise recipe for simulation; takes precedence over `case`.
    pub noise: Option<NoiseSpec>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub trace_ref: Option<PathBuf>,
}

impl Default for RunFile {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            lambda_over_n: 0.4,
            alpha1: LossWeights::DEFAULT_ALPHA1,
            alpha2: LossWeights::DEFAULT_ALPHA2,
            lr: DEFAULT_RUN_LR,
            stop: StopConfig::default(),
            seed: 0,
            case: None,
            noise: None,
            input: None,
            output: None,
            trace_ref: None,
        }
    }
}

impl RunFile {
    /// Defaults with the λ preset of `case`.
    pub fn for_case(case: u8) -> Result<Self> {
        Ok(Self {
            lambda_over_n: case_lambda_over_n(case)?,
            case: Some(case),
            ..Default::default()
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let rf: RunFile = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        rf.validate()?;
        Ok(rf)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run files always serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_bytes(path.as_ref(), format!("{}\n", self.to_json()).as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.weights(1)?;
        self.stop.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if let Some(c) = self.case {
            case_lambda_over_n(c)?;
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        Ok(())
    }

    /// Noise recipe: the explicit spec, else the case preset.
    pub fn noise_spec(&self) -> Result<Option<NoiseSpec>> {
        match (&self.noise, self.case) {
            (Some(n), _) => Ok(Some(n.clone())),
            (None, Some(c)) => Ok(Some(NoiseSpec::case(c)?)),
            (None, None) => Ok(None),
        }
    }

    /// Loss weights for a cube of `n` elements.
    pub fn weights(&self, n: usize) -> Result<LossWeights> {
        if n == 0 {
            return Err(Error::invalid("element count must be > 0"));
        }
        let w = LossWeights {
            lambda: self.lambda_over_n / n as f64,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn run_config(&self, dims: (usize, usize, usize), trace: Option<Cube>) -> Result<RunConfig> {
        let cfg = RunConfig {
            network: self.network.clone(),
            weights: self.weights(dims.0 * dims.1 * dims.2)?,
            stop: self.stop,
            lr: self.lr,
            seed: self.seed,
            trace,
        };
        cfg.validate(dims)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_presets() {
        let got: Vec<f64> = (1..=5).map(|c| case_lambda_over_n(c).unwrap()).collect();
        assert_eq!(got, vec![0.2, 0.4, 1.0, 0.4, 1.0]);
        assert!(case_lambda_over_n(0).is_err());
        assert!(case_lambda_over_n(6).is_err());
        let rf = RunFile::for_case(2).unwrap();
        let w = rf.weights(32 * 32 * 8).unwrap();
        assert_eq!(w.lambda, 0.4 / 8192.0);
        assert_eq!(rf.noise_spec().unwrap(), Some(NoiseSpec::case(2).unwrap()));
    }

    #[test]
    fn defaults_fill_missing_keys() {
        let rf: RunFile = serde_json::from_str(r#"{"seed": 7, "stop": {"k_max": 10}}"#).unwrap();
        assert_eq!(rf.seed, 7);
        assert_eq!(rf.stop.k_max, 10);
        assert_eq!(rf.stop.r, 0.01);
        assert_eq!(rf.network, NetworkConfig::default());
        assert_eq!(rf.alpha1, 0.01);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunFile>(r#"{"sed": 7}"#).is_err());
        assert!(serde_json::from_str::<RunFile>(r#"{"stop": {"kmax": 7}}"#).is_err());
        assert!(serde_json::from_str::<RunFile>(r#"{"network": {"width": 7}}"#).is_err());
    }

    #[test]
    fn write_back_materializes_everything() {
        let rf: RunFile = serde_json::from_str("{}").unwrap();
        let json = rf.to_json();
        for key in ["network", "lambda_over_n", "alpha1", "alpha2", "lr", "stop", "seed", "check_interval", "channels"] {
            assert!(json.contains(&format!("\"{key}\"")), "{key} missing");
        }
        let back: RunFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rf);
    }

    #[test]
    fn file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut rf = RunFile::for_case(5).unwrap();
        rf.seed = 42;
        rf.save(&path).unwrap();
        assert_eq!(RunFile::load(&path).unwrap(), rf);

        rf.lr = -1.0;
        rf.save(&path).unwrap();
        assert!(RunFile::load(&path).is_err());
        assert!(RunFile::load(dir.path().join("missing.json")).is_err());
    }

    #[test]
    fn run_config_uses_cube_size() {
        let rf = RunFile::for_case(3).unwrap();
        let cfg = rf.run_config((4, 5, 6), None).unwrap();
        assert_eq!(cfg.weights.lambda, 1.0 / 120.0);
        assert!(rf.run_config((4, 5, 6), Some(Cube::zeros(4, 5, 5).unwrap())).is_err());
    }
}
