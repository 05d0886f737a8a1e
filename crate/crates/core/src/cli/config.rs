//! Run configuration: one TOML or JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{ContrastHypothesis, EffectTarget, MechanismSpec};
use crate::design::{Assignment, DesignSpec};
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::estimate::InversionConfig;
use crate::exposure::ExposureMapSpec;
use crate::population::Schema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default = "two_stage_map")]
    pub exposure: ExposureMapSpec,
    #[serde(default)]
    pub hypothesis: HypothesisConfig,
    #[serde(default = "spillover_mechanism")]
    pub mechanism: MechanismSpec,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default)]
    pub power: Option<PowerConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
}

fn two_stage_map() -> ExposureMapSpec {
    ExposureMapSpec::TwoStage
}

fn spillover_mechanism() -> MechanismSpec {
    MechanismSpec::SpilloverConditional
}

/// Input files and column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub edges: Option<PathBuf>,
    /// Drop single-unit households before analysis.
    #[serde(default)]
    pub drop_singletons: bool,
    /// Build the two-hop relation needed by second-order network mappings.
    #[serde(default)]
    pub second_order: bool,
    #[serde(flatten)]
    pub schema: Schema,
}

/// Design family; the treated count is read from the observed assignment
/// when omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub kind: String,
    #[serde(default)]
    pub k1: Option<usize>,
    #[serde(default)]
    pub n1: Option<usize>,
    #[serde(default)]
    pub prob: Option<f64>,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self { kind: "two_stage".into(), k1: None, n1: None, prob: None }
    }
}

impl DesignConfig {
    pub fn resolve(&self, z_obs: Option<&Assignment>) -> Result<DesignSpec> {
        let inferred = |what: &str| -> Result<DesignSpec> {
            let z = z_obs.ok_or_else(|| {
                Error::Config(format!("design `{}` needs `{what}` or an observed assignment", self.kind))
            })?;
            DesignSpec::inferred_from(&self.kind, z)
        };
        match self.kind.as_str() {
            "two_stage" => self.k1.map_or_else(|| inferred("k1"), |k1| Ok(DesignSpec::TwoStage { k1 })),
            "complete" => self.n1.map_or_else(|| inferred("n1"), |n1| Ok(DesignSpec::Complete { n1 })),
            "bernoulli" => self
                .prob
                .map(|prob| DesignSpec::Bernoulli { prob })
                .ok_or_else(|| Error::Config("bernoulli design needs `prob`".into())),
            other => Err(Error::Config(format!("unknown design `{other}`"))),
        }
    }
}

/// Contrasted exposures, written as labels of the exposure mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisConfig {
    pub a: String,
    pub b: String,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        Self { a: "(0,0)".into(), b: "(0,1)".into() }
    }
}

impl HypothesisConfig {
    pub fn resolve(&self, map: &ExposureMapSpec) -> Result<ContrastHypothesis> {
        let a = map.parse_label(&self.a).map_err(|e| Error::Config(e.to_string()))?;
        let b = map.parse_label(&self.b).map_err(|e| Error::Config(e.to_string()))?;
        ContrastHypothesis::new(map.clone(), a, b)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    #[serde(flatten)]
    pub inversion: InversionConfig,
    /// Fraction of households used to fit the covariate regression; no
    /// adjustment when absent.
    pub holdout_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    /// Number of focal-set draws.
    pub draws: usize,
    /// Level at which the rejection fraction is reported.
    pub alpha: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { draws: 100, alpha: 0.05 }
    }
}

/// Power curves over effect sizes and household sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerConfig {
    pub k: usize,
    pub k1: usize,
    pub n_values: Vec<usize>,
    /// Effect sizes; nine steps over `[0, 2 sigma]` when absent.
    #[serde(default)]
    pub tau_values: Option<Vec<f64>>,
    pub target: EffectTarget,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default)]
    pub mu: f64,
    /// Effect held fixed on the exposure that is not tested.
    #[serde(default)]
    pub other_effect: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub mechanisms: [MechanismSpec; 2],
}

fn one() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    0.05
}

fn default_replications() -> usize {
    500
}

impl PowerConfig {
    pub fn taus(&self) -> Vec<f64> {
        self.tau_values.clone().unwrap_or_else(|| (0..9).map(|i| 2.0 * self.sigma * i as f64 / 8.0).collect())
    }
}

/// Synthetic two-stage data set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub k: usize,
    pub k1: usize,
    pub n: usize,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub tau_s: f64,
    #[serde(default)]
    pub tau_p: f64,
}

/// Command-line values that replace configured ones.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub draws: Option<usize>,
    pub replicates: Option<usize>,
    pub alpha: Option<f64>,
}

impl RunConfig {
    /// Reads a `.toml` or `.json` file. Relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(data) = &mut config.data {
            data.path = base.join(&data.path);
            if let Some(edges) = &mut data.edges {
                *edges = base.join(&*edges);
            }
        }
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(draws) = o.draws {
            self.batch.draws = draws;
        }
        if let Some(r) = o.replicates {
            self.engine.replicates = r;
        }
        if let Some(alpha) = o.alpha {
            self.batch.alpha = alpha;
            self.estimate.inversion.alpha = alpha;
            if let Some(p) = &mut self.power {
                p.alpha = alpha;
            }
        }
    }

    /// Checks values that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside (0, 1)")))
            }
        };
        unit("batch.alpha", self.batch.alpha)?;
        unit("estimate.alpha", self.estimate.inversion.alpha)?;
        if let Some(f) = self.estimate.holdout_fraction {
            unit("estimate.holdout_fraction", f)?;
        }
        if self.batch.draws == 0 {
            return Err(Error::Config("batch.draws must be positive".into()));
        }
        self.hypothesis.resolve(&self.exposure)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Recorded with every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn of(config: &RunConfig) -> Self {
        Self { config_hash: config.hash(), seed: config.seed, version: env!("CARGO_PKG_VERSION").to_string() }
    }
}
