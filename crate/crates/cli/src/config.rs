use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use balistd_core::corruption::CorruptionTable;
use balistd_core::dataset::SynthConfig;
use balistd_core::metrics::TargetMatchConfig;
use balistd_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_NAME: &str = "resolved_config.toml";
pub const SEED_ENV: &str = "BALISTD_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory used by `train` and `eval`.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub out_dir: Option<PathBuf>,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub metrics: TargetMatchConfig,
    pub corruption: CorruptionTable,
}

impl RunConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> balistd_core::Result<()> {
        self.train.validate()?;
        self.metrics.validate()?;
        self.corruption.validate()
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Flag beats environment, environment beats file.
pub fn resolve_seed(flag: Option<u64>, file: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}=`{v}` is not an unsigned integer")),
        Err(_) => Ok(file),
    }
}
