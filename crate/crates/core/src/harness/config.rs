use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{PviError, Result};
use crate::localopt::OptimizerConfig;
use crate::models::{ModelKind, ProbitScale};
use crate::server::Schedule;

/// Where the data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Synthetic logistic-regression data.
    SynthLogreg {
        dim: usize,
        n: usize,
        #[serde(default = "unit")]
        noise: f64,
        #[serde(default)]
        weight_seed: u64,
    },
    /// Gaussian-blob classification surrogate.
    Blobs {
        classes: usize,
        dim: usize,
        n: usize,
        #[serde(default = "three")]
        separation: f64,
    },
    /// MNIST IDX files under `$PVI_DATA_DIR/mnist`, else a 10-class blob
    /// surrogate of `surrogate_dim` features.
    Mnist {
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default = "surrogate_n")]
        surrogate_n: usize,
        #[serde(default = "surrogate_dim")]
        surrogate_dim: usize,
    },
    /// A CSV file; relative paths resolve against `$PVI_DATA_DIR` when set.
    Csv { path: PathBuf, target: String },
    /// Rows given directly in the config.
    Inline { inputs: Vec<Vec<f64>>, targets: Vec<f64> },
}

fn unit() -> f64 {
    1.0
}
fn three() -> f64 {
    3.0
}
fn surrogate_n() -> usize {
    2000
}
fn surrogate_dim() -> usize {
    64
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub bias: bool,
    pub noise_variance: f64,
    pub layer_widths: Vec<usize>,
    /// Variance of the isotropic zero-mean Gaussian prior.
    pub prior_variance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            bias: true,
            noise_variance: 1.0,
            layer_widths: vec![50],
            prior_variance: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    #[default]
    Pvi,
    GlobalVi,
    BcmSame,
    BcmSplit,
    Vcl,
    StreamingVb,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Pvi => "pvi",
            MethodKind::GlobalVi => "global_vi",
            MethodKind::BcmSame => "bcm_same",
            MethodKind::BcmSplit => "bcm_split",
            MethodKind::Vcl => "vcl",
            MethodKind::StreamingVb => "streaming_vb",
        }
    }
}

impl FromStr for MethodKind {
    type Err = PviError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| PviError::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: MethodKind,
    /// Client order for vcl and streaming_vb.
    pub order: Option<Vec<usize>>,
    /// Passes for streaming_vb.
    pub rounds: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    #[default]
    EveryCommit,
    EveryRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub test_fraction: f64,
    pub cadence: Cadence,
    pub probit_scale: ProbitScale,
    /// Monte Carlo draws for network predictions and free energies.
    pub mc_samples: usize,
    pub prune_threshold: f64,
    #[serde(default = "yes")]
    pub free_energy: bool,
    #[serde(default = "yes")]
    pub train_nll: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            cadence: Cadence::EveryCommit,
            probit_scale: ProbitScale::Pi,
            mc_samples: 50,
            prune_threshold: 0.1,
            free_energy: true,
            train_nll: true,
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` overrides.
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PviError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PviError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            PviError::Config(m) => PviError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(0.0..1.0).contains(&self.eval.test_fraction) {
            return Err(PviError::Config("eval.test_fraction must lie in [0, 1)".into()));
        }
        if !(self.model.prior_variance > 0.0 && self.model.noise_variance > 0.0) {
            return Err(PviError::Config("model variances must be positive".into()));
        }
        if self.split.m == 0 {
            return Err(PviError::Config("split.clients must be positive".into()));
        }
        if self.eval.mc_samples == 0 {
            return Err(PviError::Config("eval.mc_samples must be positive".into()));
        }
        Ok(())
    }
}
