//! The single JSON run configuration consumed by the CLI.
//!
//! Unknown keys are rejected; every command writes its effective config
//! (defaults filled in) next to its outputs so any run can be reproduced
//! from that copy plus the seed.

use crate::analysis::PercentileMode;
use crate::data::SyntheticConfig;
use crate::model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Analysis-stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Cell level used to tag trace records with a location token.
    pub cell_level: u8,
    pub percentile_mode: PercentileMode,
    /// Route-diagram styling bands (percentiles for the grey/blue/red split).
    pub plot_bands: (f64, f64),
    /// Presence-score cut for coverage statistics.
    pub coverage_threshold: f64,
    /// Grid level for coverage grids.
    pub coverage_level: u8,
    /// Per-class record cap for the adaptive location partition.
    pub n_max: usize,
    /// Deepest level the adaptive partition may refine to.
    pub max_cell_level: u8,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            cell_level: 2,
            percentile_mode: PercentileMode::Pooled,
            plot_bands: (90.0, 99.9),
            coverage_threshold: 0.01,
            coverage_level: 4,
            n_max: 10_000,
            max_cell_level: 8,
        }
    }
}

/// Conversion-stage settings (clustering + gate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvertConfig {
    pub experts: usize,
    pub hidden: usize,
    pub rank: usize,
    pub temperature: f64,
    pub refine_iters: usize,
    pub min_class_count: usize,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        let m = crate::moe::MoeSettings::default();
        Self {
            experts: m.experts,
            hidden: m.hidden,
            rank: m.rank,
            temperature: m.temperature,
            refine_iters: 5,
            min_class_count: 10,
        }
    }
}

impl ConvertConfig {
    pub fn settings(&self) -> crate::moe::MoeSettings {
        crate::moe::MoeSettings {
            experts: self.experts,
            hidden: self.hidden,
            rank: self.rank,
            temperature: self.temperature,
        }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub convert: ConvertConfig,
    pub data: SyntheticConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Serialize with all defaults materialized.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Override every stage seed at once (the `GEOMOE_SEED` hook).
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.data.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let json = cfg.to_json();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{ "modle": {} }"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
        let nested = r#"{ "train": { "warp_speed": 9 } }"#;
        assert!(serde_json::from_str::<RunConfig>(nested).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let json = r#"{ "train": { "epochs": 3 } }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn seed_override_touches_all_stage_seeds() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(777);
        assert_eq!(cfg.model.seed, 777);
        assert_eq!(cfg.train.seed, 777);
        assert_eq!(cfg.data.seed, 777);
    }
}
