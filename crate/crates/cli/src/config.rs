//! The run configuration: one JSON document covering every stage.

use std::path::Path;

use deep_glr::data::{NoiseConfig, PhantomSpec};
use deep_glr::networks::NetworkConfig;
use deep_glr::pfbs::PfbsConfig;
use deep_glr::training::TrainConfig;
use deep_glr::Geometry;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    /// Samples written by `generate` when `--count` is absent.
    pub count: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { count: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    /// Also write 8-bit PNG previews next to the PGM images.
    pub write_png: bool,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { write_png: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed: phantoms use `seed`, noise `seed + 1`, network init and
    /// training `seed + 2`.
    pub seed: u64,
    pub geometry: Geometry,
    pub phantom: PhantomSpec,
    pub noise: NoiseConfig,
    pub data: DataSettings,
    pub network: NetworkConfig,
    pub pfbs: PfbsConfig,
    pub train: TrainConfig,
    pub metrics: MetricSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            geometry: Geometry::desk(),
            phantom: PhantomSpec::default(),
            noise: NoiseConfig::default(),
            data: DataSettings::default(),
            network: NetworkConfig::default(),
            pfbs: PfbsConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricSettings::default(),
        };
        cfg.apply_seed(0);
        cfg
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.rng_seed = seed;
        self.noise.rng_seed = seed.wrapping_add(1);
        self.train.seed = seed.wrapping_add(2);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: String| CliError::Validation(e);
        self.geometry.validate().map_err(|e| v(format!("geometry: {e}")))?;
        self.phantom.validate().map_err(|e| v(format!("phantom: {e}")))?;
        self.noise.validate().map_err(|e| v(format!("noise: {e}")))?;
        self.network.validate().map_err(|e| v(format!("network: {e}")))?;
        self.pfbs.validate().map_err(|e| v(format!("pfbs: {e}")))?;
        self.train.validate().map_err(|e| v(format!("train: {e}")))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
