use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use riemann_laplace::datasets::{DatasetSpec, Task};
use riemann_laplace::geometry::SolverOptions;
use riemann_laplace::laplace::{HessianKind, OptimizerConfig};
use riemann_laplace::nn::MlpArchitecture;
use riemann_laplace::sampling::{Batching, SampleKind, SampleMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// One row family in the results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Point prediction at the MAP.
    Map,
    /// Vanilla samples pushed through the linearized network.
    LinLa,
    Sampled(SampleMode),
}

impl Method {
    pub fn sample_mode(&self) -> Option<SampleMode> {
        match self {
            Method::Map => None,
            Method::LinLa => Some(SampleMode::full(SampleKind::Vanilla)),
            Method::Sampled(m) => Some(*m),
        }
    }

    pub fn uses_linearized_predictive(&self) -> bool {
        match self {
            Method::Map => false,
            Method::LinLa => true,
            Method::Sampled(m) => m.kind() == SampleKind::LinRiem,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Map => f.write_str("map"),
            Method::LinLa => f.write_str("lin_la"),
            Method::Sampled(m) => m.fmt(f),
        }
    }
}

impl FromStr for Method {
    type Err = riemann_laplace::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "map" => Ok(Method::Map),
            "lin_la" => Ok(Method::LinLa),
            other => other.parse().map(Method::Sampled),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaplaceConfig {
    #[serde(default = "default_kind")]
    pub hessian_kind: HessianKind,
    #[serde(default = "default_true")]
    pub optimize_prior: bool,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self {
            hessian_kind: HessianKind::Ggn,
            optimize_prior: true,
        }
    }
}

fn default_kind() -> HessianKind {
    HessianKind::Ggn
}
fn default_true() -> bool {
    true
}
fn default_alpha() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub arch: MlpArchitecture,
    pub optimizer: OptimizerConfig,
    /// Prior precision used for training, and for the posterior unless optimized.
    #[serde(default = "default_alpha")]
    pub prior_precision: f64,
    /// Observation noise std for regression before optimization.
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub laplace: LaplaceConfig,
    pub modes: Vec<Method>,
    /// Samples per mode.
    pub samples: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub solver: SolverOptions,
    /// Calibration bins; 10 for 2D inputs, 15 otherwise when omitted.
    #[serde(default)]
    pub n_bins: Option<usize>,
    #[serde(default)]
    pub outputs: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub figures: bool,
    /// Draw every tangent as zero, so samples collapse onto the MAP.
    #[serde(default)]
    pub zero_tangent: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.dataset
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.solver
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        if !self.seeds.iter().all(|s| seen.insert(*s)) {
            return bad("seeds must be distinct".into());
        }
        if self.modes.is_empty() {
            return bad("modes must not be empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        if !self.modes.iter().all(|m| seen.insert(*m)) {
            return bad("modes must be distinct".into());
        }
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        if !(self.prior_precision > 0.0 && self.prior_precision.is_finite()) {
            return bad(format!(
                "prior_precision must be positive, got {}",
                self.prior_precision
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            ));
        }
        if self.n_bins == Some(0) {
            return bad("n_bins must be positive".into());
        }
        if self.optimizer.epochs == 0 {
            return bad("optimizer.epochs must be positive".into());
        }
        if self.task() == Task::Regression && self.arch.output_dim() != 1 {
            return bad("regression networks must have one output".into());
        }
        for mode in self.modes.iter().filter_map(Method::sample_mode) {
            if let Batching::Batched(b) = mode.batching() {
                if self.dataset.n_train != 0 && b > self.dataset.n_train {
                    return bad(format!(
                        "batch size {b} exceeds n_train = {}",
                        self.dataset.n_train
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn task(&self) -> Task {
        self.dataset.task()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
            .unwrap_or(if self.arch.input_dim() == 2 { 10 } else { 15 })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Small two-class problem used by `check` and the docs.
    pub fn toy() -> Self {
        Self {
            dataset: DatasetSpec::banana_like(60, 40, 0),
            arch: MlpArchitecture::new(vec![2, 4, 2]).expect("valid widths"),
            optimizer: OptimizerConfig::adam(0.02, 300),
            prior_precision: 1.0,
            noise_sigma: 1.0,
            laplace: LaplaceConfig::default(),
            modes: vec![
                Method::Map,
                Method::Sampled(SampleMode::full(SampleKind::Vanilla)),
            ],
            samples: 10,
            seeds: vec![0],
            solver: SolverOptions::default(),
            n_bins: None,
            outputs: None,
            figures: false,
            zero_tangent: false,
        }
    }
}
