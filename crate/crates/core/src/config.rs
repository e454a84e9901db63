//! Run configuration: a TOML document with one section per pipeline stage.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::drift::DriftOptions;
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckOptions;
use crate::splits::{SplitKind, SplitOptions};
use crate::synthetic::SyntheticSpec;
use crate::training::TrainConfig;

/// File name of the resolved configuration written into each run directory.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "default_kind")]
    pub kind: SplitKind,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_split_options")]
    pub options: SplitOptions,
}

fn default_kind() -> SplitKind {
    SplitKind::S3
}

fn default_fraction() -> f64 {
    0.2
}

fn default_split_options() -> SplitOptions {
    SplitOptions::default()
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            test_fraction: default_fraction(),
            seed: 0,
            options: SplitOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSection {
    /// Pairs whose summed loss is differentiated.
    #[serde(default = "default_gc_pairs")]
    pub pairs: usize,
    #[serde(default)]
    pub options: GradCheckOptions,
}

fn default_gc_pairs() -> usize {
    4
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            pairs: default_gc_pairs(),
            options: GradCheckOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Pair CSV; commands that need data fall back to the synthetic corpus
    /// when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Precomputed token embeddings for `precomputed` streams.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub drift: DriftOptions,
    #[serde(default)]
    pub gradcheck: GradCheckSection,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction {} outside (0, 1)",
                self.split.test_fraction
            )));
        }
        if self.gradcheck.pairs == 0 {
            return Err(Error::Config("gradcheck.pairs must be positive".into()));
        }
        self.train.validate()
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
