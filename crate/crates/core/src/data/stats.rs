use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which side of a fold boundary a set of samples comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-12;

impl StandardizationStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Dataset(format!(
                "stats need matching non-empty mean/std, got {} and {}",
                mean.len(),
                std.len()
            )));
        }
        for (c, s) in std.iter().enumerate() {
            if !(*s >= MIN_STD) || !s.is_finite() {
                return Err(Error::Dataset(format!("channel {c} has degenerate std {s}")));
            }
        }
        Ok(StandardizationStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Channel statistics over every pixel of `images` (each `[C,H,W]`).
///
/// Refuses validation data so held-out folds can never leak into the
/// normalization.
pub fn compute_stats<'a, I>(images: I, split: Split) -> Result<StandardizationStats>
where
    I: IntoIterator<Item = &'a Tensor>,
    I::IntoIter: Clone,
{
    if split == Split::Validation {
        return Err(Error::Dataset(
            "standardization statistics must come from training samples only".into(),
        ));
    }
    let images = images.into_iter();
    let mut channels = None;
    let mut sums: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for img in images.clone() {
        let s = img.shape();
        if s.len() != 3 {
            return Err(Error::Dataset(format!("expected [C,H,W] image, got {s:?}")));
        }
        match channels {
            None => {
                channels = Some(s[0]);
                sums = vec![0.0; s[0]];
            }
            Some(c) if c != s[0] => {
                return Err(Error::Dataset(format!("mixed channel counts {c} and {}", s[0])));
            }
            _ => {}
        }
        let plane = s[1] * s[2];
        for (c, chunk) in img.data().chunks(plane.max(1)).enumerate().take(s[0]) {
            sums[c] += chunk.iter().sum::<f64>();
        }
        count += plane;
    }
    let channels = channels.ok_or_else(|| Error::Dataset("no samples to compute stats from".into()))?;
    if count == 0 {
        return Err(Error::Dataset("images have no pixels".into()));
    }
    let mean: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    // Second pass about the mean; avoids the cancellation of E[x²]−E[x]².
    let mut sq = vec![0.0; channels];
    for img in images {
        let plane = img.shape()[1] * img.shape()[2];
        for (c, chunk) in img.data().chunks(plane).enumerate() {
            sq[c] += chunk.iter().map(|x| (x - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
    StandardizationStats::new(mean, std)
}

fn check_channels(x: &Tensor, stats: &StandardizationStats) -> Result<(usize, usize)> {
    let s = x.shape();
    let (c, inner) = match s.len() {
        3 => (s[0], s[1] * s[2]),
        4 => (s[1], s[2] * s[3]),
        _ => return Err(Error::Dataset(format!("expected [C,H,W] or [N,C,H,W], got {s:?}"))),
    };
    if c != stats.channels() {
        return Err(Error::Dataset(format!(
            "image has {c} channels, stats have {}",
            stats.channels()
        )));
    }
    Ok((c, inner))
}

fn per_channel(x: &Tensor, stats: &StandardizationStats, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
    let (c, inner) = check_channels(x, stats)?;
    let mut data = x.data().to_vec();
    for (i, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
        let ch = i % c;
        for v in chunk {
            *v = f(*v, stats.mean[ch], stats.std[ch]);
        }
    }
    Tensor::new(x.shape(), data)
}

/// `(x − mean) / std` per channel, for `[C,H,W]` or `[N,C,H,W]`.
pub fn standardize(x: &Tensor, stats: &StandardizationStats) -> Result<Tensor> {
    per_channel(x, stats, |v, m, s| (v - m) / s)
}

/// Inverse of [`standardize`].
pub fn destandardize(x: &Tensor, stats: &StandardizationStats) -> Result<Tensor> {
    per_channel(x, stats, |v, m, s| v * s + m)
}
