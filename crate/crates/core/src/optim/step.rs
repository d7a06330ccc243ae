//! Parameter update rules on flat slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How weight decay enters an update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "lambda")]
pub enum WeightDecay {
    None,
    /// `λθ` is added to the gradient before the update rule sees it.
    L2(f64),
    /// `lr·λ·θ` is subtracted from the parameter, outside the update rule.
    Decoupled(f64),
}

fn check(params: &[f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            op: "optimizer_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

/// Momentum SGD in the `v ← μv + g; θ ← θ − lr·v` form.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    decay: WeightDecay,
) -> Result<()> {
    check(params, grads, lr)?;
    if velocity.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: vec![params.len()],
            rhs: vec![velocity.len()],
        });
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let theta = *p;
        let g = match decay {
            WeightDecay::L2(l) => g + l * theta,
            _ => g,
        };
        *v = momentum * *v + g;
        *p = theta - lr * *v;
        if let WeightDecay::Decoupled(l) = decay {
            if l != 0.0 {
                *p -= lr * l * theta;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam. `L2` folds `λθ` into the gradient before the moment
/// updates; `Decoupled` gives AdamW.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    cfg: &AdamConfig,
    decay: WeightDecay,
) -> Result<()> {
    check(params, grads, lr)?;
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![state.m.len()],
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let theta = *p;
        let g = match decay {
            WeightDecay::L2(l) => g + l * theta,
            _ => g,
        };
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = theta - lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        if let WeightDecay::Decoupled(l) = decay {
            if l != 0.0 {
                *p -= lr * l * theta;
            }
        }
    }
    Ok(())
}

/// Adam on the raw gradient followed by the decoupled `lr·λ·θ` shrinkage.
pub fn adamw_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    cfg: &AdamConfig,
    lambda: f64,
) -> Result<()> {
    adam_step(state, params, grads, lr, cfg, WeightDecay::Decoupled(lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd() {
        let mut p = [1.0, -2.0];
        let mut v = [0.0; 2];
        sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, WeightDecay::None).unwrap();
        assert_eq!(p, [1.0 - 0.1 * 0.5, -2.0 - 0.1 * 1.0]);
    }

    #[test]
    fn decoupled_sgd_example() {
        let mut p = [1.0];
        sgd_step(&mut p, &[0.0], &mut [0.0], 0.1, 0.0, WeightDecay::Decoupled(0.1)).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_unit_scaled() {
        let mut s = AdamState::new(1);
        let mut p = [0.0];
        adam_step(&mut s, &mut p, &[1.0], 0.001, &AdamConfig::default(), WeightDecay::None).unwrap();
        assert!((p[0] + 0.001).abs() < 1e-10);
    }

    #[test]
    fn adam_zero_gradient_is_stationary() {
        let mut s = AdamState::new(2);
        let mut p = [0.3, -0.7];
        for _ in 0..10 {
            adam_step(&mut s, &mut p, &[0.0, 0.0], 0.01, &AdamConfig::default(), WeightDecay::None).unwrap();
        }
        assert_eq!(p, [0.3, -0.7]);
        let mut s = AdamState::new(1);
        let mut q = [0.5];
        adam_step(&mut s, &mut q, &[0.0], 0.01, &AdamConfig::default(), WeightDecay::L2(0.1)).unwrap();
        assert!(q[0] < 0.5);
    }

    #[test]
    fn shape_and_lr_errors() {
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut s, &mut [0.0; 2], &[0.0], 0.1, &AdamConfig::default(), WeightDecay::None).is_err());
        assert!(sgd_step(&mut [0.0], &[0.0], &mut [0.0], 0.0, 0.0, WeightDecay::None).is_err());
        assert!(sgd_step(&mut [0.0], &[0.0], &mut [], 0.1, 0.0, WeightDecay::None).is_err());
    }
}
