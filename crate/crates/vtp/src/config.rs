//! TOML run configuration.
//!
//! Sections `model`, `data`, `train_baseline`, `train_sparsity`, `prune` and
//! `finetune`; keys are the field names of the corresponding core types.
//! Unknown keys are rejected and missing keys take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vtp_core::data::SyntheticDatasetSpec;
use vtp_core::train::{Stage, TrainConfig};
use vtp_core::ModelConfig;

use crate::error::{Result, VtpError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl Default for ModelSection {
    /// The desk-scale configuration: 16px images, 4px patches, width 64,
    /// 4 layers, 4 heads, MLP ratio 4, 10 classes.
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            num_layers: 4,
            ..ModelConfig::toy()
        }
        .into()
    }
}

impl From<ModelConfig> for ModelSection {
    fn from(c: ModelConfig) -> Self {
        Self {
            image_size: c.image_size,
            patch_size: c.patch_size,
            in_channels: c.in_channels,
            embed_dim: c.embed_dim,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            mlp_ratio: c.mlp_ratio,
            num_classes: c.num_classes,
        }
    }
}

impl From<&ModelSection> for ModelConfig {
    fn from(s: &ModelSection) -> Self {
        Self {
            image_size: s.image_size,
            patch_size: s.patch_size,
            in_channels: s.in_channels,
            embed_dim: s.embed_dim,
            num_layers: s.num_layers,
            num_heads: s.num_heads,
            mlp_ratio: s.mlp_ratio,
            num_classes: s.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticDatasetSpec::default();
        Self {
            num_classes: s.num_classes,
            train_per_class: s.train_per_class,
            eval_per_class: s.eval_per_class,
            image_size: s.image_size,
            channels: s.channels,
            noise_std: s.noise_std,
            seed: s.seed,
        }
    }
}

impl From<&DataSection> for SyntheticDatasetSpec {
    fn from(s: &DataSection) -> Self {
        Self {
            num_classes: s.num_classes,
            train_per_class: s.train_per_class,
            eval_per_class: s.eval_per_class,
            image_size: s.image_size,
            channels: s.channels,
            noise_std: s.noise_std,
            seed: s.seed,
        }
    }
}

/// One training stage's settings; the stage itself is implied by the section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
}

/// `train_sparsity` additionally carries the ℓ1 weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsitySection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 50,
            base_lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            seed: 0,
            eval_every: 40,
        }
    }
}

impl Default for SparsitySection {
    fn default() -> Self {
        Self {
            epochs: SPARSITY_EPOCHS,
            batch_size: 50,
            base_lr: SPARSITY_LR,
            min_lr: SPARSITY_LR / 100.0,
            weight_decay: 0.05,
            lambda: SPARSITY_LAMBDA,
            seed: 1,
            eval_every: 40,
        }
    }
}

/// ℓ1 weight for the desk-scale task: the smallest value in a
/// 1e-4 … 1e-2 sweep whose kept and pruned gate medians differ by 2× at rate 0.4.
pub const SPARSITY_LAMBDA: f64 = 1e-3;
pub const SPARSITY_LR: f64 = 3e-3;
pub const SPARSITY_EPOCHS: usize = 12;

/// `finetune` has the same keys as `train_baseline` with its own defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 50,
            base_lr: SPARSITY_LR,
            min_lr: SPARSITY_LR / 100.0,
            weight_decay: 0.05,
            seed: 2,
            eval_every: 40,
        }
    }
}

impl From<&FinetuneSection> for TrainSection {
    fn from(s: &FinetuneSection) -> Self {
        Self {
            epochs: s.epochs,
            batch_size: s.batch_size,
            base_lr: s.base_lr,
            min_lr: s.min_lr,
            weight_decay: s.weight_decay,
            seed: s.seed,
            eval_every: s.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub rate: f64,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self { rate: 0.4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train_baseline: TrainSection,
    pub train_sparsity: SparsitySection,
    pub prune: PruneSection,
    pub finetune: FinetuneSection,
}

impl TrainSection {
    fn to_core(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            lambda: 0.0,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            VtpError::Config(format!("config: {}", e.to_string().replace('\n', " ")))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VtpError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Resolved configuration as TOML, for echoing into run logs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        (&self.model).into()
    }

    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        (&self.data).into()
    }

    pub fn stage_config(&self, stage: Stage) -> TrainConfig {
        match stage {
            Stage::Baseline => self.train_baseline.to_core(stage),
            Stage::Finetune => TrainSection::from(&self.finetune).to_core(stage),
            Stage::Sparsity => {
                let s = &self.train_sparsity;
                TrainConfig {
                    stage,
                    epochs: s.epochs,
                    batch_size: s.batch_size,
                    base_lr: s.base_lr,
                    min_lr: s.min_lr,
                    weight_decay: s.weight_decay,
                    lambda: s.lambda,
                    seed: s.seed,
                    eval_every: s.eval_every,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model_config();
        model.validate()?;
        let data = self.dataset_spec();
        data.validate()?;
        if data.num_classes != model.num_classes
            || data.image_size != model.image_size
            || data.channels != model.in_channels
        {
            return Err(VtpError::Config(
                "data.num_classes, data.image_size and data.channels must match the model section"
                    .into(),
            ));
        }
        for stage in Stage::ALL {
            self.stage_config(stage).validate()?;
        }
        if !(0.0..1.0).contains(&self.prune.rate) {
            return Err(VtpError::Config(format!(
                "prune.rate {} outside [0, 1)",
                self.prune.rate
            )));
        }
        Ok(())
    }
}
