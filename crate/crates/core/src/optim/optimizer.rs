use serde::{Deserialize, Serialize};

use super::step::{adam_step, sgd_step, AdamConfig, AdamState, WeightDecay};
use crate::error::{Error, Result};
use crate::nn::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    /// Adam with decoupled weight decay.
    Adamw,
    /// Adam with no weight decay.
    Adam,
    /// Adam with `λθ` folded into the gradient.
    AdamL2,
    Sgd,
    SgdL2,
    SgdDecoupled,
}

impl std::str::FromStr for OptimizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown optimizer {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub mode: OptimizerMode,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            mode: OptimizerMode::Adamw,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn decay(&self) -> WeightDecay {
        match self.mode {
            OptimizerMode::Adam | OptimizerMode::Sgd => WeightDecay::None,
            OptimizerMode::AdamL2 | OptimizerMode::SgdL2 => WeightDecay::L2(self.weight_decay),
            OptimizerMode::Adamw | OptimizerMode::SgdDecoupled => WeightDecay::Decoupled(self.weight_decay),
        }
    }

    pub fn is_adam(&self) -> bool {
        matches!(self.mode, OptimizerMode::Adam | OptimizerMode::AdamL2 | OptimizerMode::Adamw)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Slot {
    Adam(AdamState),
    Sgd(Vec<f64>),
}

/// Per-parameter optimizer state aligned with a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    slots: Vec<Option<Slot>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParameterStore) -> Result<Self> {
        config.validate()?;
        let slots = store
            .iter()
            .map(|(_, e)| {
                e.trainable.then(|| {
                    let n = e.tensor.numel();
                    if config.is_adam() {
                        Slot::Adam(AdamState::new(n))
                    } else {
                        Slot::Sgd(vec![0.0; n])
                    }
                })
            })
            .collect();
        Ok(Optimizer {
            config,
            slots,
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `momentum` is β1 for Adam variants and μ for SGD,
    /// so a schedule can drive both. Entries with no gradient are skipped.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &[Option<Vec<f64>>],
        lr: f64,
        momentum: f64,
    ) -> Result<()> {
        if grads.len() != self.slots.len() || store.len() != self.slots.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} gradients for {} parameters",
                self.slots.len(),
                grads.len(),
                store.len()
            )));
        }
        let decay = self.config.decay();
        let adam = AdamConfig {
            beta1: momentum,
            beta2: self.config.beta2,
            epsilon: self.config.epsilon,
        };
        for (i, (slot, grad)) in self.slots.iter_mut().zip(grads).enumerate() {
            let (Some(slot), Some(grad)) = (slot.as_mut(), grad) else {
                continue;
            };
            let (_, entry) = store.entry_at_mut(i).expect("aligned");
            let params = entry.tensor.data_mut();
            match slot {
                Slot::Adam(state) => adam_step(state, params, grad, lr, &adam, decay)?,
                Slot::Sgd(v) => sgd_step(params, grad, v, lr, momentum, decay)?,
            }
            if params.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer_step" });
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn skips_frozen_and_buffers() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::ones(&[2]), true).unwrap();
        store.insert("frozen", Tensor::ones(&[2]), true).unwrap();
        store.insert("running_mean", Tensor::ones(&[2]), false).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default(), &store).unwrap();
        let grads = vec![Some(vec![1.0, -1.0]), None, Some(vec![5.0, 5.0])];
        opt.step(&mut store, &grads, 0.01, 0.9).unwrap();
        assert_ne!(store.tensor("w").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(store.tensor("frozen").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(store.tensor("running_mean").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("adamw".parse::<OptimizerMode>().unwrap(), OptimizerMode::Adamw);
        assert_eq!("sgd_l2".parse::<OptimizerMode>().unwrap(), OptimizerMode::SgdL2);
        assert!("lamb".parse::<OptimizerMode>().is_err());
    }
}
