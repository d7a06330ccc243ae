//! Central finite-difference gradient oracle shared by the integration tests.
//!
//! Independent of the backward rules: it only ever runs forward passes on
//! constant inputs.
#![allow(dead_code)]

use minet::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;

/// Below this magnitude the relative error is measured against this floor
/// instead, i.e. it degrades to an absolute check of `tol * FLOOR`.
pub const FLOOR: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Values bounded away from zero, so relu/abs kinks are never within a step.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output element contributes to the checked gradient.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out)?.to_vec();
    let weights = tape.constant(random_tensor(&shape, seed ^ 0x9e37, -1.0, 1.0));
    let prod = tape.mul(out, weights)?;
    tape.sum(prod)
}

pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares backward-pass gradients of `f` at `inputs` with central
/// differences over every input element.
pub fn check_all<F>(inputs: &[Tensor], f: F) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).unwrap().numel()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars).unwrap();
        tape.value(loss).unwrap().data()[0]
    };

    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        assert_eq!(analytic[k].len(), input.numel());
        for (i, &a) in analytic[k].iter().enumerate() {
            let numeric = central_difference(inputs, k, i, &eval);
            max_rel_error = max_rel_error.max(rel_error(a, numeric));
            checked += 1;
        }
    }
    GradReport {
        max_rel_error,
        checked,
    }
}

pub fn central_difference(
    inputs: &[Tensor],
    which: usize,
    element: usize,
    eval: &dyn Fn(&[Tensor]) -> f64,
) -> f64 {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[element] += STEP;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[element] -= STEP;
    (eval(&plus) - eval(&minus)) / (2.0 * STEP)
}
