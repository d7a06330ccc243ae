//! Run configuration: one flat, versioned TOML document holding every knob
//! the pipeline uses. The merged configuration is embedded in every output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::nn::{build_architecture, ArchId, HeadKind, HeadSpec, ModelSpec};
use crate::optim::{LrFinderConfig, OptimizerConfig, OptimizerMode};
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub arch: ArchId,
    pub head: HeadKind,
    pub classes: usize,
    pub head_dropout1: f64,
    pub head_dropout2: f64,
    pub optimizer: OptimizerMode,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_max: f64,
    pub div_factor: f64,
    pub momentum_high: f64,
    pub momentum_low: f64,
    pub one_cycle: bool,
    pub epochs: usize,
    pub batch: usize,
    pub k: usize,
    pub stratified: bool,
    pub seed: u64,
    pub resize: usize,
    pub crop: usize,
    pub freeze_body: bool,
    /// Checkpoint to start training from; empty for seeded initialization.
    pub init_checkpoint: String,
    pub lr_find_min: f64,
    pub lr_find_max: f64,
    pub lr_find_steps: usize,
    pub lr_find_smoothing: f64,
    pub lr_find_divergence: f64,
    pub data: String,
    pub out: String,
    #[serde(flatten)]
    pub augment: AugmentationPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        let train = TrainConfig::default();
        let lr = LrFinderConfig::default();
        let head = HeadSpec::new(HeadKind::ConcatPool);
        RunConfig {
            schema_version: SCHEMA_VERSION,
            arch: ArchId::Densenet121,
            head: head.kind,
            classes: 7,
            head_dropout1: head.dropout.0,
            head_dropout2: head.dropout.1,
            optimizer: opt.mode,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.epsilon,
            lr_max: train.lr_max,
            div_factor: train.div_factor,
            momentum_high: train.momentum_range.0,
            momentum_low: train.momentum_range.1,
            one_cycle: train.one_cycle,
            epochs: train.epochs,
            batch: train.batch_size,
            k: 5,
            stratified: false,
            seed: train.seed,
            resize: train.resize,
            crop: train.crop,
            freeze_body: false,
            init_checkpoint: String::new(),
            lr_find_min: lr.lr_min,
            lr_find_max: lr.lr_max,
            lr_find_steps: lr.steps,
            lr_find_smoothing: lr.smoothing,
            lr_find_divergence: lr.divergence_factor,
            data: "data".into(),
            out: "runs".into(),
            augment: AugmentationPolicy::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; missing keys take defaults, unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(bad) = table.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Config(format!("unknown key {bad:?}")));
        }
        if let Some(v) = table.get("schema_version").and_then(|v| v.as_integer()) {
            if v > i64::from(SCHEMA_VERSION) {
                return Err(Error::Config(format!(
                    "schema version {v} is newer than supported version {SCHEMA_VERSION}"
                )));
            }
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.k < 2 {
            return fail(format!("k must be >= 2, got {}", self.k));
        }
        if self.epochs == 0 || self.batch < 2 {
            return fail("epochs must be >= 1 and batch >= 2".into());
        }
        if !(self.lr_max > 0.0) || !(self.div_factor > 1.0) {
            return fail("lr_max must be positive and div_factor > 1".into());
        }
        for (name, p) in [("head_dropout1", self.head_dropout1), ("head_dropout2", self.head_dropout2)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} must be in [0,1), got {p}"));
            }
        }
        if self.crop == 0 || self.crop > self.resize {
            return fail(format!("crop {} must be in 1..={}", self.crop, self.resize));
        }
        self.optimizer_config().validate()?;
        self.lr_finder_config().validate()?;
        self.augment.validate()
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            mode: self.optimizer,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr_max: self.lr_max,
            div_factor: self.div_factor,
            momentum_range: (self.momentum_high, self.momentum_low),
            one_cycle: self.one_cycle,
            optimizer: self.optimizer_config(),
            seed: self.seed,
            resize: self.resize,
            crop: self.crop,
            augment: self.augment.clone(),
            freeze_body: self.freeze_body,
        }
    }

    pub fn lr_finder_config(&self) -> LrFinderConfig {
        LrFinderConfig {
            lr_min: self.lr_find_min,
            lr_max: self.lr_find_max,
            steps: self.lr_find_steps,
            smoothing: self.lr_find_smoothing,
            divergence_factor: self.lr_find_divergence,
        }
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            dropout: (self.head_dropout1, self.head_dropout2),
            ..HeadSpec::new(self.head)
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        build_architecture(
            &self.arch.architecture(),
            self.classes,
            self.head_spec(),
            (3, self.crop, self.crop),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert!(text.contains("schema_version = 1"));
        assert!(text.contains("max_rotation = 10.0"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = RunConfig::from_toml("arch = \"resnet18\"\nepochs = 3\nwarp_p = 0.0\n").unwrap();
        assert_eq!(c.arch, ArchId::Resnet18);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.augment.warp_p, 0.0);
        assert_eq!(c.batch, 16);
    }

    #[test]
    fn rejects_unknown_and_newer() {
        assert!(RunConfig::from_toml("learning_rate = 1.0").is_err());
        assert!(RunConfig::from_toml("schema_version = 2").is_err());
        assert!(RunConfig::from_toml("k = 1").is_err());
        assert!(RunConfig::from_toml("arch = \"vgg\"").is_err());
    }

    #[test]
    fn derived_configs() {
        let c = RunConfig::default();
        assert_eq!(c.model_spec().unwrap().count_parameters(), 8_011_655);
        assert_eq!(c.train_config(), TrainConfig::default());
    }
}
