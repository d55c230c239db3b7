//! Experiment configuration, one TOML document with five sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engines::{BackendSpec, SimulatedEngineConfig};
use crate::neural::{ApproximatorArch, PreprocessorArch};
use crate::selection::{BudgetPolicy, SelectionStrategy, StrategyKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory holding `manifest.jsonl`.
    pub dir: PathBuf,
    pub prune_fraction: f64,
    /// Validation strips per pass; 0 means the whole split.
    pub validation_subsample: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: PathBuf::from("data"),
            prune_fraction: 0.0,
            validation_subsample: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub unet_levels: usize,
    pub unet_channels: usize,
    pub unet_skip_gain: f64,
    pub crnn_conv1: usize,
    pub crnn_conv2: usize,
    pub crnn_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            unet_levels: 2,
            unet_channels: 8,
            unet_skip_gain: 4.0,
            crnn_conv1: 8,
            crnn_conv2: 16,
            crnn_hidden: 24,
        }
    }
}

impl ModelSection {
    pub fn preprocessor(&self) -> PreprocessorArch {
        PreprocessorArch {
            levels: self.unet_levels,
            base_channels: self.unet_channels,
            skip_gain: self.unet_skip_gain,
        }
    }

    pub fn approximator(&self, input_height: usize, classes: usize) -> ApproximatorArch {
        ApproximatorArch {
            conv1_channels: self.crnn_conv1,
            conv2_channels: self.crnn_conv2,
            hidden: self.crnn_hidden,
            input_height,
            classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: u32,
    pub pretrain_epochs: u32,
    pub lr_approximator: f64,
    pub lr_preprocessor: f64,
    pub lr_pretrain: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub jitter_sigmas: Vec<f64>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 50,
            pretrain_epochs: 50,
            lr_approximator: 1e-4,
            lr_preprocessor: 5e-5,
            lr_pretrain: 1e-4,
            weight_decay: 5e-4,
            beta: 1.0,
            jitter_sigmas: vec![0.0, 0.01, 0.02, 0.03, 0.04, 0.05],
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub percent: f64,
    pub min_per_batch: usize,
    pub strategy: StrategyKind,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            percent: 100.0,
            min_per_batch: 1,
            strategy: StrategyKind::UniformCer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub spec: BackendSpec,
    pub cost_per_query: f64,
    /// Append-only response cache; none keeps it in memory for the run.
    pub cache: Option<PathBuf>,
    pub max_in_flight: usize,
    pub timeout_seconds: f64,
    pub binarize_threshold: f64,
    pub reject_distance: f64,
}

impl Default for BackendSection {
    fn default() -> Self {
        let sim = SimulatedEngineConfig::default();
        BackendSection {
            spec: BackendSpec::Simulated,
            cost_per_query: 0.0,
            cache: None,
            max_in_flight: 4,
            timeout_seconds: 30.0,
            binarize_threshold: sim.binarize_threshold,
            reject_distance: sim.reject_distance,
        }
    }
}

impl BackendSection {
    pub fn simulated(&self) -> SimulatedEngineConfig {
        SimulatedEngineConfig {
            binarize_threshold: self.binarize_threshold,
            reject_distance: self.reject_distance,
            ..SimulatedEngineConfig::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub budget: BudgetSection,
    pub backend: BackendSection,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn budget_policy(&self) -> BudgetPolicy {
        BudgetPolicy {
            budget_percent: self.budget.percent,
            min_per_batch: self.budget.min_per_batch,
        }
    }

    pub fn strategy(&self) -> SelectionStrategy {
        SelectionStrategy {
            kind: self.budget.strategy,
            seed: self.train.seed,
        }
    }

    /// Names of every key that fails validation.
    pub fn invalid_keys(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, key: &str| {
            if !ok {
                bad.push(key.to_string());
            }
        };
        let t = &self.train;
        check((0.0..1.0).contains(&self.data.prune_fraction), "data.prune_fraction");
        check(self.model.unet_levels >= 1, "model.unet_levels");
        check(self.model.unet_channels >= 1, "model.unet_channels");
        check(self.model.unet_skip_gain.is_finite(), "model.unet_skip_gain");
        check(self.model.crnn_conv1 >= 1, "model.crnn_conv1");
        check(self.model.crnn_conv2 >= 1, "model.crnn_conv2");
        check(self.model.crnn_hidden >= 1, "model.crnn_hidden");
        check(t.lr_approximator > 0.0 && t.lr_approximator.is_finite(), "train.lr_approximator");
        check(t.lr_preprocessor > 0.0 && t.lr_preprocessor.is_finite(), "train.lr_preprocessor");
        check(t.lr_pretrain > 0.0 && t.lr_pretrain.is_finite(), "train.lr_pretrain");
        check(t.weight_decay >= 0.0 && t.weight_decay.is_finite(), "train.weight_decay");
        check(t.beta >= 0.0 && t.beta.is_finite(), "train.beta");
        check(
            !t.jitter_sigmas.is_empty() && t.jitter_sigmas.iter().all(|s| *s >= 0.0 && s.is_finite()),
            "train.jitter_sigmas",
        );
        check(t.batch_size >= 1, "train.batch_size");
        check((0.0..=100.0).contains(&self.budget.percent), "budget.percent");
        check(self.budget.min_per_batch >= 1, "budget.min_per_batch");
        check(self.backend.cost_per_query >= 0.0, "backend.cost_per_query");
        check(self.backend.max_in_flight >= 1, "backend.max_in_flight");
        check(self.backend.timeout_seconds > 0.0, "backend.timeout_seconds");
        check(self.backend.simulated().is_valid(), "backend.binarize_threshold");
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.invalid_keys();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid values for {}", bad.join(", "))))
        }
    }
}
