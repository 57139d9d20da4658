use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::elliptic::SolveConfig;
use crate::environment::CoefficientMap;
use crate::error::{Error, Result};
use crate::lattice::TorusGeometry;
use crate::resolvent::QuadratureSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Verify,
    EstimateAh,
    EstimateQ,
    CorrelationMap,
    KernelK,
    TwoScaleBattery,
    ConvBounds,
    GreenDecay,
    GffDefect,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Verify => "verify",
            Experiment::EstimateAh => "estimate-ah",
            Experiment::EstimateQ => "estimate-q",
            Experiment::CorrelationMap => "correlation-map",
            Experiment::KernelK => "kernel-k",
            Experiment::TwoScaleBattery => "two-scale-battery",
            Experiment::ConvBounds => "conv-bounds",
            Experiment::GreenDecay => "green-decay",
            Experiment::GffDefect => "gff-defect",
        }
    }
}

/// Mehler quadrature used for `Q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QConfig {
    pub nodes: usize,
    pub samples: usize,
}

impl Default for QConfig {
    fn default() -> Self {
        Self { nodes: 6, samples: 250 }
    }
}

/// Radii windows of the correlation analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Lower end of the exponent window; the upper end is `L / 4`.
    pub fit_min_radius: f64,
    /// Lower end of the window for the decay of `|C - K|`.
    pub difference_min_radius: f64,
    /// Remove the torus periodization of `K` from `C` before comparing.
    pub periodization: bool,
    pub bootstrap: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            fit_min_radius: 4.0,
            difference_min_radius: 2.0,
            periodization: true,
            bootstrap: 1000,
        }
    }
}

/// Fixed kernel inputs for `kernel-k`; the identity when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// Row-major `d x d`.
    pub q: Vec<f64>,
    pub homogenized: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: Option<Experiment>,
    pub dimension: usize,
    pub side: usize,
    pub seed: u64,
    pub samples: usize,
    pub mu: f64,
    pub xi: Vec<f64>,
    pub map: CoefficientMap,
    pub quadrature: QConfig,
    pub solver: SolveConfig,
    pub analysis: AnalysisConfig,
    pub kernel: Option<KernelConfig>,
    /// Contrasts swept by `gff-defect`.
    pub contrasts: Vec<f64>,
    pub output: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            dimension: 3,
            side: 16,
            seed: 1,
            samples: 100,
            mu: 0.0,
            xi: vec![1.0, 0.0, 0.0],
            map: CoefficientMap::Tanh {
                a_min: 0.8,
                a_max: 1.2,
                tau: 1.0,
            },
            quadrature: QConfig::default(),
            solver: SolveConfig::default(),
            analysis: AnalysisConfig::default(),
            kernel: None,
            contrasts: vec![1.2, 3.0, 9.0],
            output: None,
            threads: None,
        }
    }
}

impl RunConfig {
    /// Parses TOML; errors name the offending key path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            path: String::new(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        if self.dimension < 2 {
            return Err(bad("dimension", format!("{} is below 2", self.dimension)));
        }
        if self.side < 2 {
            return Err(bad("side", format!("{} is below 2", self.side)));
        }
        if self.samples == 0 {
            return Err(bad("samples", "must be positive".into()));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(bad("mu", format!("{} must be finite and non-negative", self.mu)));
        }
        if self.xi.len() != self.dimension {
            return Err(bad("xi", format!("has {} entries for dimension {}", self.xi.len(), self.dimension)));
        }
        if self.xi.iter().all(|&v| v == 0.0) {
            return Err(bad("xi", "must be non-zero".into()));
        }
        if self.quadrature.nodes == 0 {
            return Err(bad("quadrature.nodes", "must be positive".into()));
        }
        if self.quadrature.samples == 0 {
            return Err(bad("quadrature.samples", "must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(bad("threads", "must be positive".into()));
        }
        if self.contrasts.iter().any(|&c| !(c > 1.0)) {
            return Err(bad("contrasts", "every contrast must exceed 1".into()));
        }
        self.map.validate().map_err(|e| bad("map", e.to_string()))?;
        self.solver.validate().map_err(|e| bad("solver", e.to_string()))?;
        if let Some(k) = &self.kernel {
            let d = self.dimension;
            if k.q.len() != d * d {
                return Err(bad("kernel.q", format!("needs {} entries", d * d)));
            }
            if k.homogenized.len() != d {
                return Err(bad("kernel.homogenized", format!("needs {d} entries")));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<TorusGeometry> {
        TorusGeometry::new(self.dimension, self.side)
    }

    pub fn q_spec(&self) -> Result<QuadratureSpec> {
        QuadratureSpec::new(self.quadrature.nodes, self.quadrature.samples, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let c = RunConfig::from_toml("side = 8\nseed = 4\n[map]\nfamily = \"tanh\"\na_min = 0.9\na_max = 1.1\ntau = 2.0\n").unwrap();
        assert_eq!(c.side, 8);
        assert_eq!(c.dimension, 3);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        match RunConfig::from_toml("[quadrature]\nnodez = 3\n") {
            Err(Error::Config { path, .. }) => assert!(path.starts_with("quadrature"), "{path}"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml("[map]\nfamily = \"tanh\"\na_min = 0.5\na_max = 1.5\ntau = 1.0\nextra = 1\n") {
            Err(Error::Config { path, .. }) => assert!(path.starts_with("map"), "{path}"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml("side = \"big\"\n") {
            Err(Error::Config { path, .. }) => assert_eq!(path, "side"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml("xi = [1.0, 0.0]\n") {
            Err(Error::Config { path, .. }) => assert_eq!(path, "xi"),
            other => panic!("{other:?}"),
        }
    }
}
