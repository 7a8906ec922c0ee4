//! The declarative run configuration: defaults, then the TOML file, then
//! command-line flags.

use std::path::Path;

use hazard_core::autoencoder::AutoencoderConfig;
use hazard_core::dataset::SynthConfig;
use hazard_core::detector::DetectorConfig;
use hazard_core::training::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Failure, Result};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSettings {
    /// Fixed alarm threshold; when absent it is calibrated on the
    /// validation split at `percentile`.
    pub threshold: Option<f64>,
    pub percentile: f64,
}

impl Default for StreamSettings {
    fn default() -> Self {
        Self {
            threshold: None,
            percentile: 99.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub scales: Vec<u32>,
    pub first_layer_sizes: Vec<usize>,
    pub bottleneck_sizes: Vec<usize>,
    pub patch_counts: Vec<usize>,
    pub aggregations: Vec<String>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 4, 8],
            first_layer_sizes: vec![128],
            bottleneck_sizes: vec![16],
            patch_counts: vec![250],
            aggregations: vec!["mean".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    /// Worker threads; 0 means the available hardware parallelism.
    pub workers: usize,
    pub synth: SynthConfig,
    pub model: AutoencoderConfig,
    pub training: TrainingConfig,
    pub detector: DetectorConfig,
    pub stream: StreamSettings,
    pub sweep: SweepGrid,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Failure::Config(e.to_string()))
    }

    /// Record the configuration a run actually used.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG_FILE), self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c: RunConfig = toml::from_str("[training]\nbatch_size = 32\n[detector]\nscale = 2\n").unwrap();
        assert_eq!(c.training.batch_size, 32);
        assert_eq!(c.training.total_samples, 2_000_000);
        assert_eq!(u32::from(c.detector.scale), 2);
        assert_eq!(c.model.first_layer_size, 128);
    }
}
