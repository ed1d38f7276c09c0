//! Operational surface: experiment configuration, dataset handling, the
//! training loop, mAP evaluation, ablation and sweep runners, and exports.

pub mod data;
pub mod eval;
pub mod experiments;
pub mod export;
pub mod gradsuite;
pub mod report;
pub mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Components, DetectorConfig, LossConfig, ModelConfig};
use crate::distengine::DistConfig;
use crate::error::{config_err, Result};
use crate::synthworld::SplitSpec;

pub use data::Dataset;
pub use eval::{average_precision, evaluate_map, scored_triplets, EvalResult, ScoredTriplet, IOU_THRESHOLD};
pub use experiments::{
    ablation_configs, run_ablation, sweep_configs, sweep_pattern_dim, AblationSuite, DEFAULT_SWEEP_GRID,
};
pub use export::{export_dist, CosineRow, DistStatRow};
pub use gradsuite::{gradient_suite, GradEntry};
pub use report::{read_csv, write_csv, EpochMetrics, ReportRow};
pub use train::{evaluate_model, load_run, objective, train, Objective, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epoch at which the learning rate drops by 10x.
    pub lr_drop: usize,
    pub batch_size: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Seed of the frozen noise stream used at evaluation.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_drop: 3,
            batch_size: 8,
            clip_norm: 0.1,
            seed: 42,
            eval_seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 1600,
            n_test: 400,
            seed: 7,
            split: SplitSpec::default(),
        }
    }
}

/// Everything one run needs, as read from `--config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: DetectorConfig,
    pub dist: DistConfig,
    pub loss: LossConfig,
    pub components: Components,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            model: self.model,
            dist: self.dist,
            loss: self.loss,
            components: self.components,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(t.weight_decay >= 0.0) || !(t.clip_norm >= 0.0) {
            return Err(config_err!("lr must be positive; weight_decay and clip_norm non-negative"));
        }
        if self.data.n_test == 0 {
            return Err(config_err!("the test split is empty"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"train": {"epochs": 7}, "model": {"N_s": 4}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.model.n_s, 4);
        assert_eq!(cfg.dist, DistConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"train": {"epoch": 7}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"optim": {}}"#).is_err());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let mut cfg = ExperimentConfig::default();
        cfg.loss.lambda_do = 0.1 + 0.2;
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
