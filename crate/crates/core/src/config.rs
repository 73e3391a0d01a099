//! The TOML run configuration.
//!
//! ```toml
//! [run]
//! seed = 7
//! output = "tiny-2bit"            # relative to the output root
//!
//! [data]
//! train = "train.qds"             # relative to this file
//! eval = "eval.qds"               # optional
//!
//! [model]
//! input = [16, 16, 1]
//! layers = [
//!   { type = "conv2d", filters = 8, kernel = 3 },
//!   { type = "batch_norm" },
//!   { type = "relu" },
//!   { type = "flatten" },
//!   { type = "dense", units = 2 },
//! ]
//!
//! [qgt]
//! lambda = 0.05
//! quantizer = { scheme = "asymmetric", bits = 2, granularity = "per_channel" }
//!
//! [train]
//! epochs = 10
//! batch_size = 32
//! optimizer = "adam"
//! learning_rate = 0.003
//!
//! [report]
//! bins = 32
//! ```
//!
//! Unknown keys are rejected everywhere. The run seed drives weight
//! initialization and shuffling; there is no other source of randomness.

use crate::autodiff::Architecture;
use crate::qgt::{QgtConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable that overrides the output root directory.
pub const OUTPUT_ROOT_ENV: &str = "QGT_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config `{path}`: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Run directory, resolved against the output root when relative.
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    #[serde(default)]
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default = "default_bins")]
    pub bins: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { bins: default_bins() }
    }
}

fn default_bins() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: Architecture,
    pub qgt: QgtConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub report: ReportSection,
}

impl RunConfig {
    /// Parses a TOML document. Relative data paths are resolved against
    /// `base`, and the training seed is taken from `run.seed`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: base.to_path_buf(),
            message: e.to_string(),
        })?;
        if cfg.train.seed != 0 && cfg.train.seed != cfg.run.seed {
            return Err(ConfigError::Invalid(
                "set the seed once, in [run]; train.seed must be omitted".into(),
            ));
        }
        cfg.train.seed = cfg.run.seed;
        cfg.data.train = base.join(&cfg.data.train);
        cfg.data.eval = cfg.data.eval.map(|p| base.join(p));
        cfg.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if cfg.report.bins == 0 {
            return Err(ConfigError::Invalid("report.bins must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// The run directory: `run.output` under the output root, which is
    /// `$QGT_OUTPUT_ROOT` when set and the working directory otherwise.
    pub fn output_dir(&self) -> PathBuf {
        output_root().join(&self.run.output)
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}
