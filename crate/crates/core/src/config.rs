//! Experiment configuration read from TOML. Every field has a default, so a
//! partial file only overrides what it names.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logutility::{ThetaFamily, WealthModel, SWEEP_DELTAS};
use crate::paths::{build_paths, FiltrationPath, IntensitySpec, TimeGrid};
use crate::regression::{BasisFn, RegressionBasis};
use crate::sde::Rule;
use crate::timefn::TimeFn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub numerics: NumericsConfig,
    pub run: RunConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub horizon: f64,
    pub x0: f64,
    pub alpha: TimeFn<f64>,
    pub beta: TimeFn<f64>,
    pub mu: f64,
    pub intensity: TimeFn<f64>,
    /// Upper bound `c` on the intensity; defaults to its supremum on `[0, T]`.
    pub intensity_bound: Option<f64>,
    pub theta: ThetaFamily,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            x0: 1.0,
            alpha: TimeFn::constant(0.05),
            beta: TimeFn::constant(0.2),
            mu: -0.5,
            intensity: TimeFn::constant(0.3),
            intensity_bound: None,
            theta: ThetaFamily::Constant { value: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsConfig {
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub basis: Vec<BasisFn>,
    pub split_on_default: bool,
    pub fd_step: f64,
    pub tolerances: Tolerances,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        let b = RegressionBasis::default();
        Self {
            n_steps: 20,
            n_paths: 10_000,
            seed: 20_240_611,
            basis: b.features,
            split_on_default: b.split_on_default,
            fd_step: 1e-4,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub picard: f64,
    pub picard_max_iter: usize,
    pub concavity: f64,
    pub contraction: f64,
    pub contraction_max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            picard: 1e-24,
            picard_max_iter: 200,
            concavity: 1e-4,
            contraction: 1e-12,
            contraction_max_iter: 8,
        }
    }
}

/// Control used by `simulate-sde`, `solve-bsde`, `verify-smp` and
/// `directional-derivative`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    Constant { value: f64 },
    PiHat,
    ScaledPiHat { factor: f64 },
}

/// Perturbation direction `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectionSpec {
    Constant {
        value: f64,
    },
    /// `value` before default, zero after.
    PreDefault {
        value: f64,
    },
    /// `intercept + slope * t`
    Linear {
        intercept: f64,
        slope: f64,
    },
}

impl DirectionSpec {
    pub fn rule(&self) -> Rule<f64> {
        match *self {
            DirectionSpec::Constant { value } => Arc::new(move |_| value),
            DirectionSpec::PreDefault { value } => Arc::new(move |c| value * (1.0 - c.h)),
            DirectionSpec::Linear { intercept, slope } => Arc::new(move |c| intercept + slope * c.t),
        }
    }
}

/// Which backward equation `solve-bsde` solves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BsdeRun {
    /// Adjoint equation of the wealth problem under `run.control`.
    Adjoint,
    /// Linear equation with constant coefficients and terminal `a + b W_T`.
    Linear {
        phi: f64,
        alpha: f64,
        pi: f64,
        mu: f64,
        beta: f64,
        terminal_const: f64,
        terminal_w: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub control: ControlSpec,
    pub directions: Vec<DirectionSpec>,
    pub search_lo: f64,
    pub search_hi: f64,
    pub deltas: Vec<f64>,
    pub bsde: BsdeRun,
    /// Number of paths written to per-path CSV files.
    pub csv_paths: usize,
    /// Smaller path counts in `selftest`.
    pub quick: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            control: ControlSpec::PiHat,
            directions: vec![DirectionSpec::Constant { value: 1.0 }],
            search_lo: 0.05,
            search_hi: 5.0,
            deltas: SWEEP_DELTAS.to_vec(),
            bsde: BsdeRun::Adjoint,
            csv_paths: 100,
            quick: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.numerics;
        let t = &n.tolerances;
        if n.n_paths < 100 {
            return Err(field("numerics.n_paths", format!("must be >= 100 (got {})", n.n_paths)));
        }
        if n.n_steps < 2 {
            return Err(field("numerics.n_steps", format!("must be >= 2 (got {})", n.n_steps)));
        }
        for (name, v) in [
            ("numerics.fd_step", n.fd_step),
            ("numerics.tolerances.picard", t.picard),
            ("numerics.tolerances.concavity", t.concavity),
            ("numerics.tolerances.contraction", t.contraction),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field(name, format!("must be > 0 (got {v})")));
            }
        }
        if t.picard_max_iter == 0 || t.contraction_max_iter == 0 {
            return Err(field("numerics.tolerances", "iteration limits must be >= 1"));
        }
        if !(self.run.search_lo < self.run.search_hi) {
            return Err(field("run.search_lo", "must be below run.search_hi"));
        }
        if self.run.directions.is_empty() {
            return Err(field("run.directions", "at least one direction is required"));
        }
        self.wealth_model().validate().map_err(|e| field("model", e))?;
        Ok(())
    }

    pub fn intensity(&self) -> IntensitySpec<f64> {
        let m = &self.model;
        let bound = m.intensity_bound.unwrap_or_else(|| m.intensity.sup_on(m.horizon));
        IntensitySpec::new(m.intensity.clone(), bound)
    }

    pub fn wealth_model(&self) -> WealthModel<f64> {
        let m = &self.model;
        WealthModel {
            alpha: m.alpha.clone(),
            beta: m.beta.clone(),
            mu: m.mu,
            intensity: self.intensity(),
            s0: m.x0,
            theta: m.theta,
            horizon: m.horizon,
        }
    }

    pub fn basis(&self) -> RegressionBasis {
        RegressionBasis::new(self.numerics.basis.clone(), self.numerics.split_on_default)
    }

    pub fn grid(&self) -> Result<TimeGrid<f64>> {
        TimeGrid::uniform(self.model.horizon, self.numerics.n_steps)
    }

    pub fn paths(&self) -> Result<Vec<FiltrationPath<f64>>> {
        build_paths(&self.grid()?, &self.intensity(), self.numerics.seed, self.numerics.n_paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn partial_override() {
        let c = ExperimentConfig::from_toml_str("[numerics]\nn_paths = 500\n[model.theta]\nfamily = \"exp_martingale\"\na = 1.0\n").unwrap();
        assert_eq!(c.numerics.n_paths, 500);
        assert_eq!(c.model.theta, ThetaFamily::ExpMartingale { a: 1.0 });
    }

    #[test]
    fn field_diagnostics() {
        let e = ExperimentConfig::from_toml_str("[numerics]\nn_paths = 5\n").unwrap_err().to_string();
        assert!(e.contains("numerics.n_paths"), "{e}");
        let e = ExperimentConfig::from_toml_str("[numerics]\nn_pathz = 500\n").unwrap_err().to_string();
        assert!(e.contains("n_pathz") && e.contains("line 2"), "{e}");
        let e = ExperimentConfig::from_toml_str("[numerics.tolerances]\nconcavity = -1.0\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("concavity"), "{e}");
    }

    #[test]
    fn round_trip() {
        let c = ExperimentConfig::default();
        let s = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&s).unwrap(), c);
    }
}
