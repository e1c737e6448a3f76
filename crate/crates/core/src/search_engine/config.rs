use serde::{Deserialize, Serialize};

use crate::arch_space::LayoutConfig;
use crate::bench::{DatasetConfig, FinetuneConfig};
use crate::error::{Error, Result};
use crate::ggm::GgmConfig;
use crate::optim::AdamConfig;
use crate::relaxation::{ScheduleShape, TemperatureSchedule};

/// Which logits the final genotype is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeriveFrom {
    /// The mixer-updated `α'`.
    Updated,
    /// The raw per-cell `α`.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureConfig {
    pub initial: f64,
    pub minimum: f64,
    pub shape: ScheduleShape,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self {
            initial: 1.0,
            minimum: 0.03,
            shape: ScheduleShape::Linear,
        }
    }
}

/// Momentum SGD with cosine decay for the supernet weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr_max: 0.025,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

impl SgdConfig {
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            v.push(format!("{prefix}lr_max must be > 0, got {}", self.lr_max));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            v.push(format!(
                "{prefix}lr_min must lie in (0, lr_max], got {}",
                self.lr_min
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("{prefix}momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!("{prefix}weight_decay must be >= 0, got {}", self.weight_decay));
        }
        v
    }
}

/// Everything a search run (and the retraining of its result) depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub layout: LayoutConfig,
    pub data: DatasetConfig,
    /// Weight of `ln(latency)` in the search loss.
    pub beta: f64,
    pub temperature: TemperatureConfig,
    pub ggm: GgmConfig,
    /// Adam for `α` and the mixer weights.
    pub arch_optimizer: AdamConfig,
    pub weight_optimizer: SgdConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Std of the Gaussian initial `α`.
    pub arch_init_scale: f64,
    pub derive_from: DeriveFrom,
    /// Take the cross-entropy of the architecture update from a search-val
    /// batch while the weights keep training on search-train.
    pub held_out_ce: bool,
    pub augment: bool,
    /// Checkpoint period in steps when a checkpoint directory is given;
    /// 0 writes only the final state.
    pub checkpoint_every: usize,
    pub finetune: FinetuneConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            // the toy generator draws at most 6 classes
            layout: LayoutConfig {
                num_classes: 6,
                ..LayoutConfig::default()
            },
            data: DatasetConfig {
                size: [64, 64],
                num_classes: 6,
                ..DatasetConfig::default()
            },
            beta: 0.005,
            temperature: TemperatureConfig::default(),
            ggm: GgmConfig::default(),
            arch_optimizer: AdamConfig::default(),
            weight_optimizer: SgdConfig::default(),
            batch_size: 16,
            steps: 1000,
            seed: 0,
            arch_init_scale: 1e-3,
            derive_from: DeriveFrom::Updated,
            held_out_ce: false,
            augment: true,
            checkpoint_every: 0,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl SearchConfig {
    /// The calibrated desk-scale preset used by the acceptance suite.
    pub fn toy() -> Self {
        Self {
            layout: LayoutConfig {
                num_cells: 6,
                num_nodes: 2,
                initial_channels: 6,
                reductions: Some(vec![3]),
                stem_strides: [1, 1, 2],
                aspp_rates: vec![1, 2, 3],
                aspp_channels: 8,
                num_classes: 3,
                input_size: [32, 32],
            },
            data: DatasetConfig::default(),
            batch_size: 8,
            steps: 200,
            finetune: FinetuneConfig {
                epochs: 30,
                lr: 0.05,
                keep_fraction: 1.0,
                ..FinetuneConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn temperature_schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            initial: self.temperature.initial,
            minimum: self.temperature.minimum,
            // the last step runs at exactly the minimum
            total_steps: self.steps.saturating_sub(1).max(1),
            shape: self.temperature.shape,
        }
    }

    /// Every schema violation, not only the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.layout.violations();
        let stride = crate::arch_space::build_network_layout(&self.layout)
            .map(|l| l.total_stride())
            .unwrap_or(1);
        v.extend(self.data.violations(stride));
        if self.data.num_classes != self.layout.num_classes {
            v.push(format!(
                "data.num_classes ({}) differs from layout.num_classes ({})",
                self.data.num_classes, self.layout.num_classes
            ));
        }
        if self.data.size != self.layout.input_size {
            v.push(format!(
                "data.size {:?} differs from layout.input_size {:?}",
                self.data.size, self.layout.input_size
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            v.push(format!("beta must be >= 0, got {}", self.beta));
        }
        let mut sched = self.temperature_schedule();
        sched.total_steps = sched.total_steps.max(1);
        v.extend(sched.violations());
        v.extend(self.ggm.violations());
        v.extend(self.arch_optimizer.violations("arch_optimizer."));
        v.extend(self.weight_optimizer.violations("weight_optimizer."));
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if self.steps == 0 {
            v.push("steps must be >= 1".into());
        }
        if !(self.arch_init_scale >= 0.0 && self.arch_init_scale.is_finite()) {
            v.push(format!("arch_init_scale must be >= 0, got {}", self.arch_init_scale));
        }
        if self.data.search_train == 0 {
            v.push("data.search_train must be >= 1".into());
        }
        if self.held_out_ce && self.data.search_val == 0 {
            v.push("held_out_ce needs data.search_val >= 1".into());
        }
        v.extend(self.finetune.violations("finetune."));
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization is infallible")
    }
}
