//! TOML run configuration. Every section rejects unknown keys; the error
//! names the offending key and lists the accepted ones.

use std::path::Path;

use serde::{Deserialize, Serialize};

use timba::mamba::{Direction, MambaSettings};
use timba::masking::{FailureSpec, MaskStrategy};
use timba::model::ModelConfig;
use timba::pipeline::{AdamConfig, LrSchedule, TrainConfig};
use timba::{Error, Result};

use crate::synthetic::SyntheticSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Root seed; `--seed` overrides it.
    pub seed: u64,
    pub data: SyntheticSpec,
    pub scenario: ScenarioSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub impute: ImputeSection,
    pub study: StudySection,
}

/// Missingness applied to the synthetic ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// `point` or `block`.
    pub kind: ScenarioKind,
    /// Point-missing rate (the extra point rate for `block`).
    pub missing_rate: f64,
    /// Block starts per sensor and step (`block` only).
    pub block_prob: f64,
    pub block_min_len: usize,
    pub block_max_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Point,
    Block,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self { kind: ScenarioKind::Point, missing_rate: 0.25, block_prob: 0.0015, block_min_len: 12, block_max_len: 48 }
    }
}

/// Model hyperparameters, one key per row of the hyperparameter table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Time length `L`.
    pub seq_len: usize,
    /// Channel size `d`.
    pub channels: usize,
    /// Layers of noise estimation.
    pub layers: usize,
    pub heads: usize,
    pub virtual_nodes: usize,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub mamba_dropout: f64,
    /// SSM state expansion factor `n`.
    pub state_dim: usize,
    pub conv_width: usize,
    /// Mamba block expansion factor `E`.
    pub expansion: usize,
    pub direction: Direction,
    pub step_embedding_dim: usize,
    /// Parallel scan chunk; 0 runs the sequential scan.
    pub scan_chunk: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            seq_len: m.seq_len,
            channels: m.channels,
            layers: m.layers,
            heads: m.heads,
            virtual_nodes: m.virtual_nodes,
            diffusion_steps: m.diffusion_steps,
            beta_min: m.beta_min,
            beta_max: m.beta_max,
            mamba_dropout: m.mamba.dropout,
            state_dim: m.mamba.state_dim,
            conv_width: m.mamba.conv_width,
            expansion: m.mamba.expansion,
            direction: m.direction,
            step_embedding_dim: m.step_embedding_dim,
            scan_chunk: m.scan_chunk,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, nodes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            channels: self.channels,
            layers: self.layers,
            heads: self.heads,
            virtual_nodes: self.virtual_nodes,
            mamba: MambaSettings {
                expansion: self.expansion,
                conv_width: self.conv_width,
                state_dim: self.state_dim,
                dropout: self.mamba_dropout,
            },
            seq_len: self.seq_len,
            nodes,
            diffusion_steps: self.diffusion_steps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            direction: self.direction,
            step_embedding_dim: self.step_embedding_dim,
            scan_chunk: self.scan_chunk,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub windows_per_epoch: usize,
    pub learning_rate: f64,
    pub lr_milestones: Vec<f64>,
    pub lr_rates: Vec<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub strategy: MaskStrategy,
    pub validation_repeats: usize,
    pub validation_seed: u64,
    /// Simulated-failure windows for the historical strategies.
    pub failure_pool: usize,
    pub failure_rate: f64,
    pub failure_mean_len: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let f = FailureSpec::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            windows_per_epoch: t.windows_per_epoch,
            learning_rate: t.learning_rate.base,
            lr_milestones: t.learning_rate.milestones.clone(),
            lr_rates: t.learning_rate.rates.clone(),
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            weight_decay: t.adam.weight_decay,
            strategy: t.strategy,
            validation_repeats: t.validation_repeats,
            validation_seed: t.validation_seed,
            failure_pool: 64,
            failure_rate: f.outage_rate,
            failure_mean_len: f.mean_outage,
            train_fraction: 0.7,
            val_fraction: 0.1,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            windows_per_epoch: self.windows_per_epoch,
            learning_rate: LrSchedule {
                base: self.learning_rate,
                milestones: self.lr_milestones.clone(),
                rates: self.lr_rates.clone(),
            },
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            seed,
            validation_seed: self.validation_seed,
            validation_repeats: self.validation_repeats,
            strategy: self.strategy,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn failure_spec(&self) -> FailureSpec {
        FailureSpec { outage_rate: self.failure_rate, mean_outage: self.failure_mean_len }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeSection {
    /// Draws per missing value `K`.
    pub samples: usize,
}

impl Default for ImputeSection {
    fn default() -> Self {
        Self { samples: 25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    /// Training seeds of the direction ablation.
    pub ablation_seeds: Vec<u64>,
    /// Point-missing rates of the sensitivity sweep.
    pub rates: Vec<f64>,
    pub downstream_seeds: Vec<u64>,
    /// `max_degree`, `min_degree`, or a node index.
    pub downstream_node: NodeChoice,
    pub mlp_hidden: usize,
    pub mlp_epochs: usize,
    pub mlp_learning_rate: f64,
    pub mlp_l2: f64,
    pub mlp_train_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeChoice {
    MaxDegree,
    MinDegree,
    #[serde(untagged)]
    Index(usize),
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            ablation_seeds: vec![0, 1, 2],
            rates: (1..=9).map(|i| i as f64 / 10.0).collect(),
            downstream_seeds: vec![0, 1, 2, 3, 4],
            downstream_node: NodeChoice::MaxDegree,
            mlp_hidden: 100,
            mlp_epochs: 500,
            mlp_learning_rate: 1e-3,
            mlp_l2: 1e-4,
            mlp_train_fraction: 0.8,
        }
    }
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config()?;
        self.train.to_train_config(self.seed)?;
        if self.impute.samples == 0 {
            return Err(Error::Config("impute.samples must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.scenario.missing_rate) {
            return Err(Error::Config(format!("scenario.missing_rate {} outside [0, 1)", self.scenario.missing_rate)));
        }
        let (tf, vf) = (self.train.train_fraction, self.train.val_fraction);
        if !(tf > 0.0 && vf >= 0.0 && tf + vf < 1.0) {
            return Err(Error::Config("train/val fractions must be positive and sum below 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.to_model_config(self.data.nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = BenchConfig::default();
        let back = BenchConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = BenchConfig::from_toml("[model]\nchanels = 8\n").unwrap_err().to_string();
        assert!(err.contains("chanels"), "{err}");
        assert!(err.contains("channels"), "{err}");
        let err = BenchConfig::from_toml("sed = 3\n").unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = BenchConfig::from_toml("seed = 5\n[model]\nchannels = 8\nheads = 2\n[study]\ndownstream_node = 3\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.model.channels, 8);
        assert_eq!(cfg.model.layers, ModelSection::default().layers);
        assert_eq!(cfg.study.downstream_node, NodeChoice::Index(3));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(BenchConfig::from_toml("[model]\nheads = 3\n").is_err());
        assert!(BenchConfig::from_toml("[impute]\nsamples = 0\n").is_err());
        assert!(BenchConfig::from_toml("[train]\nlr_rates = [1e-2, 1e-5]\n").is_err());
    }
}
