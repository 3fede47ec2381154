//! Experiment configuration documents.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bnprepair::ingest::AdultFeature;
use bnprepair::metrics::HistogramConfig;
use bnprepair::simgen::{GmmSpec, MixtureModelSpec, DEFAULT_DRAW_CAP};
use bnprepair::stopping::{BaseMeasure, PriorSpec, StoppingConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    StoppingCategorical,
    StoppingGmm,
    PriorSweep,
    RbSweep,
    BenchmarkGmm,
    Adult,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [
        ExperimentId::StoppingCategorical,
        ExperimentId::StoppingGmm,
        ExperimentId::PriorSweep,
        ExperimentId::RbSweep,
        ExperimentId::BenchmarkGmm,
        ExperimentId::Adult,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::StoppingCategorical => "stopping-categorical",
            ExperimentId::StoppingGmm => "stopping-gmm",
            ExperimentId::PriorSweep => "prior-sweep",
            ExperimentId::RbSweep => "rb-sweep",
            ExperimentId::BenchmarkGmm => "benchmark-gmm",
            ExperimentId::Adult => "adult",
        }
    }

    /// Uniform base-measure bounds used when the config gives no prior.
    /// `None` for Adult, whose bounds come from the data.
    pub fn default_prior_bounds(self) -> Option<(f64, f64)> {
        match self {
            ExperimentId::StoppingCategorical => Some((-5.0, 5.0)),
            ExperimentId::StoppingGmm | ExperimentId::PriorSweep => Some((-8.0, 3.0)),
            ExperimentId::RbSweep => Some((-6.0, 6.0)),
            ExperimentId::BenchmarkGmm => Some((-10.0, 12.0)),
            ExperimentId::Adult => None,
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown experiment '{s}'")))
    }
}

/// Learner and estimator settings shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub nu0: f64,
    /// Base measure; experiments fall back to their own default.
    pub prior: Option<BaseMeasure>,
    pub stopping: StoppingConfig,
    pub histogram: HistogramConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { nu0: 0.001, prior: None, stopping: StoppingConfig::default(), histogram: HistogramConfig::default() }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.nu0 > 0.0) || !self.nu0.is_finite() {
            return Err(CliError::Usage(format!("nu0 must be positive, got {}", self.nu0)));
        }
        self.stopping.validate()?;
        self.histogram.validate()?;
        if let Some(base) = self.prior {
            PriorSpec { base, nu0: self.nu0 }.validate()?;
        }
        Ok(())
    }

    /// The configured prior, or a uniform one on `fallback`.
    pub fn prior_or(&self, fallback: (f64, f64)) -> Result<PriorSpec, CliError> {
        let base = self.prior.unwrap_or(BaseMeasure::Uniform { min: fallback.0, max: fallback.1 });
        let p = PriorSpec { base, nu0: self.nu0 };
        p.validate()?;
        Ok(p)
    }
}

fn default_trials() -> usize {
    50
}
fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_q_values() -> Vec<usize> {
    vec![5000, 500, 50, 10, 5]
}
fn default_nu0_values() -> Vec<f64> {
    vec![0.001, 0.01, 0.1, 1.0]
}
fn default_prior_means() -> Vec<f64> {
    vec![-5.0, -3.0, -1.0, 1.0, 3.0]
}
fn default_pr_u0_values() -> Vec<f64> {
    vec![0.025, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5]
}
fn default_draw_cap() -> u64 {
    DEFAULT_DRAW_CAP
}
fn default_features() -> Vec<AdultFeature> {
    AdultFeature::ALL.to_vec()
}
fn default_holdout() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    pub experiment: ExperimentId,
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    #[serde(default = "default_draw_cap")]
    pub draw_cap: u64,
    /// Adds per-trial wall time to the records, which makes reruns differ.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Output directory; not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,

    /// Category counts for `stopping-categorical`.
    #[serde(default = "default_q_values")]
    pub q_values: Vec<usize>,
    /// Prior weights for `prior-sweep`.
    #[serde(default = "default_nu0_values")]
    pub nu0_values: Vec<f64>,
    /// Means of the unit-variance Gaussian priors in `prior-sweep`.
    #[serde(default = "default_prior_means")]
    pub prior_means: Vec<f64>,
    /// `Pr[U=0]` grid for `rb-sweep`.
    #[serde(default = "default_pr_u0_values")]
    pub pr_u0_values: Vec<f64>,
    /// Stream law for `stopping-gmm` and `prior-sweep`.
    #[serde(default = "GmmSpec::minority_component")]
    pub gmm: GmmSpec,
    /// Overrides the labelled model of `benchmark-gmm`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<MixtureModelSpec>,
    /// Adult file or directory; `ADULT_DATA_DIR` or `data/adult` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adult_path: Option<PathBuf>,
    #[serde(default = "default_features")]
    pub features: Vec<AdultFeature>,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentId, seed: u64) -> Self {
        Self {
            schema_version: CONFIG_VERSION,
            experiment,
            seed,
            trials: default_trials(),
            pipeline: PipelineConfig::default(),
            draw_cap: default_draw_cap(),
            record_wall_time: false,
            out: None,
            q_values: default_q_values(),
            nu0_values: default_nu0_values(),
            prior_means: default_prior_means(),
            pr_u0_values: default_pr_u0_values(),
            gmm: GmmSpec::minority_component(),
            model: None,
            adult_path: None,
            features: default_features(),
            holdout_fraction: default_holdout(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let c: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.schema_version != CONFIG_VERSION {
            return bad(format!("config schema version {} is not supported", self.schema_version));
        }
        self.pipeline.validate()?;
        if self.draw_cap == 0 {
            return bad("draw_cap must be positive".into());
        }
        if self.q_values.iter().any(|&q| q == 0) {
            return bad("q values must be positive".into());
        }
        if self.nu0_values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return bad("nu0 values must be positive".into());
        }
        if self.prior_means.iter().any(|m| !m.is_finite()) {
            return bad("prior means must be finite".into());
        }
        if self.pr_u0_values.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return bad("Pr[U=0] values must lie in (0, 1)".into());
        }
        self.gmm.validate()?;
        if let Some(m) = &self.model {
            m.validate()?;
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout fraction must lie in (0, 1), got {}", self.holdout_fraction));
        }
        if self.features.is_empty() {
            return bad("at least one Adult feature is required".into());
        }
        Ok(())
    }

    /// Canonical JSON of everything that affects results.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        serde_json::to_string(&c).expect("config serializes")
    }

    /// Hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn hash(&self) -> String {
        hex_sha256(self.canonical_json().as_bytes())
    }

    pub fn labelled_model(&self) -> MixtureModelSpec {
        self.model.clone().unwrap_or_else(MixtureModelSpec::intersectionality)
    }

    pub fn adult_path(&self) -> PathBuf {
        self.adult_path
            .clone()
            .or_else(|| std::env::var_os("ADULT_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/adult"))
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
