use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position in a one-cycle schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: usize,
    pub total_steps: usize,
    pub lr_max: f64,
    pub div_factor: f64,
    /// `(high, low)`; momentum starts high, bottoms out at the lr peak.
    pub momentum_range: (f64, f64),
}

impl ScheduleState {
    pub fn new(total_steps: usize, lr_max: f64, div_factor: f64, momentum_range: (f64, f64)) -> Result<Self> {
        let s = ScheduleState {
            step: 0,
            total_steps,
            lr_max,
            div_factor,
            momentum_range,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if self.step > self.total_steps {
            return Err(Error::invalid(format!(
                "step {} beyond total {}",
                self.step, self.total_steps
            )));
        }
        if !(self.lr_max > 0.0) || !self.lr_max.is_finite() {
            return Err(Error::Config(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        if !(self.div_factor > 1.0) || !self.div_factor.is_finite() {
            return Err(Error::Config(format!("div_factor must exceed 1, got {}", self.div_factor)));
        }
        Ok(())
    }

    pub fn at(&self, step: usize) -> Self {
        ScheduleState { step, ..*self }
    }
}

/// `(lr, momentum)` at `state.step`.
///
/// Both phases span `total_steps / 2` and interpolate linearly between
/// `lr_max / div_factor` and `lr_max`; momentum runs the opposite way. The
/// interpolation is written as `hi·t + lo·(1−t)` so that the endpoints and
/// the peak are hit exactly and `lr(s) == lr(total − s)` holds bitwise.
pub fn one_cycle(state: &ScheduleState) -> Result<(f64, f64)> {
    state.validate()?;
    let total = state.total_steps as f64;
    let half = total / 2.0;
    let s = state.step as f64;
    let t = if s <= half { s / half } else { (total - s) / half };
    let lo = state.lr_max / state.div_factor;
    let lr = state.lr_max * t + lo * (1.0 - t);
    let (m_hi, m_lo) = state.momentum_range;
    let momentum = m_lo * t + m_hi * (1.0 - t);
    Ok((lr, momentum))
}

/// Learning-rate policy for a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    OneCycle {
        total_steps: usize,
        lr_max: f64,
        div_factor: f64,
        momentum_range: (f64, f64),
    },
    /// Fixed lr and momentum, for comparison runs.
    Constant { lr: f64, momentum: f64 },
}

impl Schedule {
    pub fn at(&self, step: usize) -> Result<(f64, f64)> {
        match *self {
            Schedule::OneCycle {
                total_steps,
                lr_max,
                div_factor,
                momentum_range,
            } => one_cycle(&ScheduleState {
                step,
                total_steps,
                lr_max,
                div_factor,
                momentum_range,
            }),
            Schedule::Constant { lr, momentum } => Ok((lr, momentum)),
        }
    }
}
