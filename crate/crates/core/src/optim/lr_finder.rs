use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrFinderConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Number of multiplicative increments from `lr_min` to `lr_max`.
    pub steps: usize,
    /// Exponential smoothing coefficient for the loss.
    pub smoothing: f64,
    /// Stop once the smoothed loss exceeds this multiple of the best one.
    pub divergence_factor: f64,
}

impl Default for LrFinderConfig {
    fn default() -> Self {
        LrFinderConfig {
            lr_min: 1e-7,
            lr_max: 10.0,
            steps: 100,
            smoothing: 0.98,
            divergence_factor: 4.0,
        }
    }
}

impl LrFinderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.steps < 10 {
            return Err(Error::Config(format!("lr range test needs >= 10 steps, got {}", self.steps)));
        }
        if !(0.0..1.0).contains(&self.smoothing) || !(self.divergence_factor > 1.0) {
            return Err(Error::Config("smoothing must be in [0,1) and divergence factor > 1".into()));
        }
        Ok(())
    }

    /// The `i`-th learning rate, `lr_min · r^i` with `r = (lr_max/lr_min)^(1/steps)`.
    pub fn lr_at(&self, i: usize) -> f64 {
        let r = (self.lr_max / self.lr_min).powf(1.0 / self.steps as f64);
        self.lr_min * r.powf(i as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrPoint {
    pub lr: f64,
    pub loss: f64,
    pub smoothed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrFinderResult {
    pub points: Vec<LrPoint>,
    /// Learning rate at which the sweep stopped, if it stopped early.
    pub stop_lr: Option<f64>,
    /// Learning rate at the steepest descent of smoothed loss against log lr.
    pub suggestion: Option<f64>,
}

/// Runs `train_step(lr)` once per grid point, each call doing one update at
/// that lr and returning the mini-batch loss measured before the update.
///
/// The sweep ends early when the bias-corrected smoothed loss exceeds
/// `divergence_factor` times the best smoothed loss so far, or when the
/// loss stops being finite. A non-finite loss before anything was recorded
/// is an error.
pub fn lr_range_test<F>(cfg: &LrFinderConfig, mut train_step: F) -> Result<LrFinderResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    cfg.validate()?;
    let mut points: Vec<LrPoint> = Vec::new();
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    let mut stop_lr = None;
    for i in 0..=cfg.steps {
        let lr = cfg.lr_at(i);
        let loss = match train_step(lr) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::NonFinite { .. }) if !points.is_empty() => {
                stop_lr = Some(lr);
                break;
            }
            Ok(l) => return Err(Error::Diverged(format!("loss {l} at lr {lr} before any record"))),
            Err(e) => return Err(e),
        };
        avg = cfg.smoothing * avg + (1.0 - cfg.smoothing) * loss;
        let smoothed = avg / (1.0 - cfg.smoothing.powi(i as i32 + 1));
        points.push(LrPoint { lr, loss, smoothed });
        if i > 0 && smoothed > cfg.divergence_factor * best {
            stop_lr = Some(lr);
            break;
        }
        best = best.min(smoothed);
    }
    let suggestion = steepest_descent(&points);
    Ok(LrFinderResult {
        points,
        stop_lr,
        suggestion,
    })
}

/// Leading points skipped by the suggestion; the bias-corrected average is
/// still dominated by single batches there.
pub const SUGGEST_SKIP_START: usize = 10;
/// Trailing points skipped by the suggestion, where the sweep is blowing up.
pub const SUGGEST_SKIP_END: usize = 5;

/// Interior point with the most negative central-difference slope of the
/// smoothed loss with respect to `ln lr`, ignoring the ends of the sweep.
fn steepest_descent(points: &[LrPoint]) -> Option<f64> {
    if points.len() < SUGGEST_SKIP_START + SUGGEST_SKIP_END + 3 {
        return None;
    }
    let mut best: Option<(f64, f64)> = None;
    for w in points[SUGGEST_SKIP_START..points.len() - SUGGEST_SKIP_END].windows(3) {
        let slope = (w[2].smoothed - w[0].smoothed) / (w[2].lr.ln() - w[0].lr.ln());
        if slope < 0.0 && best.is_none_or(|(s, _)| slope < s) {
            best = Some((slope, w[1].lr));
        }
    }
    best.map(|(_, lr)| lr)
}
