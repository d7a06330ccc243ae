use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assignment of every sample to one of `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    pub assignments: Vec<usize>,
}

fn check(n: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Dataset(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::Dataset(format!("cannot split {n} samples into {k} folds")));
    }
    Ok(())
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Seeded shuffle, then round-robin: the i-th shuffled sample goes to fold
/// `i mod k`.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    check(n, k)?;
    let mut assignments = vec![0; n];
    for (i, s) in shuffled(n, seed).into_iter().enumerate() {
        assignments[s] = i % k;
    }
    Ok(FoldPlan {
        k,
        seed,
        stratified: false,
        assignments,
    })
}

/// Like [`kfold_split`] but deals each class out in turn, continuing the
/// round-robin counter across classes. Fold sizes still differ by at most
/// one and every class is spread as evenly as possible.
pub fn kfold_split_stratified(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    check(labels.len(), k)?;
    let order = shuffled(labels.len(), seed);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut assignments = vec![0; labels.len()];
    let mut counter = 0;
    for c in 0..classes {
        for &s in order.iter().filter(|&&s| labels[s] == c) {
            assignments[s] = counter % k;
            counter += 1;
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        stratified: true,
        assignments,
    })
}

impl FoldPlan {
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }

    /// Sample indices held out in `fold`, ascending.
    pub fn validation_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    /// Sample indices of every other fold, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignments[i] != fold).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.assignments.iter().find(|&&f| f >= self.k) {
            return Err(Error::Dataset(format!("fold index {bad} out of range for k={}", self.k)));
        }
        Ok(())
    }
}
