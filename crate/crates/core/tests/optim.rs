//! Loss, update rules, the one-cycle schedule and the LR range test.

use minet::optim::{
    adam_step, adamw_step, cross_entropy, lr_range_test, one_cycle, sgd_step, softmax, AdamConfig, AdamState,
    LossBatch, LrFinderConfig, ScheduleState, WeightDecay,
};
use minet::train::TrainConfig;
use minet::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Naive softmax cross-entropy straight from the definition.
fn ce_oracle(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(k).zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[y].exp() / z).ln();
    }
    total / labels.len() as f64
}

fn logits_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, usize)> {
    (2usize..6, 1usize..5).prop_flat_map(|(k, n)| {
        (
            prop::collection::vec(-5.0f64..5.0, n * k),
            prop::collection::vec(0..k, n),
            Just(k),
        )
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((logits, labels, k) in logits_strategy()) {
        let n = labels.len();
        let p = softmax(&Tensor::new(&[n, k], logits).unwrap()).unwrap();
        for row in p.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn fused_loss_matches_composition((logits, labels, k) in logits_strategy()) {
        let n = labels.len();
        let oracle = ce_oracle(&logits, k, &labels);
        let fused = cross_entropy(&LossBatch::new(Tensor::new(&[n, k], logits).unwrap(), labels).unwrap()).unwrap();
        prop_assert!(fused >= 0.0);
        prop_assert!((fused - oracle).abs() < 1e-12, "fused {} oracle {}", fused, oracle);
    }

    #[test]
    fn loss_gradient_is_softmax_minus_onehot((logits, labels, k) in logits_strategy()) {
        let n = labels.len();
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[n, k], logits.clone()).unwrap());
        let loss = tape.cross_entropy(x, &labels).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().unwrap();
        for (i, row) in logits.chunks(k).enumerate() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..k {
                let expected = (row[j].exp() / z - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
                prop_assert!((g[i * k + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_l2_equals_decoupled_without_momentum(
        params in prop::collection::vec(-3.0f64..3.0, 1..8),
        seed in any::<u64>(),
        lr in 1e-4f64..1.0,
        lambda in 0.0f64..0.1,
    ) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads: Vec<f64> = params.iter().map(|_| normal.sample(&mut rng)).collect();
        let (mut a, mut b) = (params.clone(), params.clone());
        let mut va = vec![0.0; params.len()];
        let mut vb = va.clone();
        sgd_step(&mut a, &grads, &mut va, lr, 0.0, WeightDecay::L2(lambda)).unwrap();
        sgd_step(&mut b, &grads, &mut vb, lr, 0.0, WeightDecay::Decoupled(lambda)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0), "{} vs {}", x, y);
        }
    }

    #[test]
    fn adamw_without_decay_is_adam(
        params in prop::collection::vec(-3.0f64..3.0, 1..8),
        seed in any::<u64>(),
    ) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AdamConfig::default();
        let (mut a, mut b) = (params.clone(), params.clone());
        let mut sa = AdamState::new(params.len());
        let mut sb = AdamState::new(params.len());
        for _ in 0..5 {
            let grads: Vec<f64> = params.iter().map(|_| normal.sample(&mut rng)).collect();
            adam_step(&mut sa, &mut a, &grads, 1e-2, &cfg, WeightDecay::None).unwrap();
            adamw_step(&mut sb, &mut b, &grads, 1e-2, &cfg, 0.0).unwrap();
        }
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn one_cycle_is_symmetric_and_bounded(total in 2usize..500, lr_max in 1e-4f64..1.0, div in 2.0f64..100.0) {
        let s = ScheduleState::new(total, lr_max, div, (0.95, 0.85)).unwrap();
        for step in 0..=total {
            let (lr, mom) = one_cycle(&s.at(step)).unwrap();
            let (lr_m, mom_m) = one_cycle(&s.at(total - step)).unwrap();
            prop_assert_eq!(lr.to_bits(), lr_m.to_bits());
            prop_assert_eq!(mom.to_bits(), mom_m.to_bits());
            prop_assert!(lr >= lr_max / div * (1.0 - 1e-12) && lr <= lr_max * (1.0 + 1e-12));
            prop_assert!((0.85 - 1e-12..=0.95 + 1e-12).contains(&mom));
        }
    }
}

#[test]
fn adam_l2_and_adamw_part_ways() {
    // f(θ) = θ₀² + 10·θ₁², gradient (2θ₀, 20θ₁).
    let grad = |p: &[f64]| vec![2.0 * p[0], 20.0 * p[1]];
    let cfg = AdamConfig::default();
    let lambda = 0.1;
    let mut a = vec![1.0, 1.0];
    let mut b = a.clone();
    let mut sa = AdamState::new(2);
    let mut sb = AdamState::new(2);
    let mut gap: f64 = 0.0;
    for _ in 0..2 {
        let (ga, gb) = (grad(&a), grad(&b));
        adam_step(&mut sa, &mut a, &ga, 0.1, &cfg, WeightDecay::L2(lambda)).unwrap();
        adamw_step(&mut sb, &mut b, &gb, 0.1, &cfg, lambda).unwrap();
        gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(gap, f64::max);
    }
    assert!(gap > 1e-6, "gap {gap:e}");
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let cfg = AdamConfig::default();
    let mut p = vec![0.5, -0.25, 2.0];
    let g = [3.0, -0.01, 1e3];
    let mut s = AdamState::new(3);
    adam_step(&mut s, &mut p, &g, 1e-3, &cfg, WeightDecay::None).unwrap();
    // m̂ = g and v̂ = g² after bias correction.
    for ((after, before), g) in p.iter().zip([0.5, -0.25, 2.0]).zip(g) {
        let expected = before - 1e-3 * g / (g.abs() + cfg.epsilon);
        assert!((after - expected).abs() < 1e-15);
    }
}

#[test]
fn sgd_momentum_accumulates_velocity() {
    let mut p = vec![1.0];
    let mut v = vec![0.0];
    sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, WeightDecay::None).unwrap();
    sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, WeightDecay::None).unwrap();
    assert!((v[0] - 1.9).abs() < 1e-15);
    assert!((p[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
}

#[test]
fn uniform_logits_give_log_k() {
    for k in 2..8 {
        let ln_k = (k as f64).ln();
        let single = LossBatch::new(Tensor::full(&[1, k], 0.7), vec![k - 1]).unwrap();
        assert_eq!(cross_entropy(&single).unwrap(), ln_k);
        // Averaging n equal terms may round by one ulp.
        for n in 2..6 {
            let batch = LossBatch::new(Tensor::full(&[n, k], 0.7), (0..n).map(|i| i % k).collect()).unwrap();
            assert!((cross_entropy(&batch).unwrap() - ln_k).abs() <= f64::EPSILON * ln_k);
        }
    }
}

#[test]
fn one_cycle_shape() {
    let total = 200;
    let cfg = TrainConfig::default();
    let schedule = cfg.schedule(total);
    let trace: Vec<(f64, f64)> = (0..=total).map(|s| schedule.at(s).unwrap()).collect();
    let lr: Vec<f64> = trace.iter().map(|t| t.0).collect();
    let mom: Vec<f64> = trace.iter().map(|t| t.1).collect();
    assert_eq!(cfg.lr_max, 1e-2);

    let argmax = (0..=total).max_by(|&a, &b| lr[a].total_cmp(&lr[b])).unwrap();
    let argmin = (0..=total).min_by(|&a, &b| mom[a].total_cmp(&mom[b])).unwrap();
    assert_eq!(argmax, total / 2);
    assert_eq!(argmin, argmax);
    assert_eq!(lr[total / 2], 1e-2);
    assert_eq!(lr[0], 1e-2 / 25.0);
    assert_eq!(lr[total], lr[0]);

    // Exactly two linear pieces of equal length.
    let slope: Vec<f64> = lr.windows(2).map(|w| w[1] - w[0]).collect();
    let (up, down) = slope.split_at(total / 2);
    assert_eq!(up.len(), down.len());
    for s in up {
        assert!((s - up[0]).abs() < 1e-15 && *s > 0.0);
    }
    for s in down {
        assert!((s + up[0]).abs() < 1e-15);
    }
    // Within a phase the two interpolation weights sum to one.
    let (hi, lo) = (lr[total / 2], lr[0]);
    for s in 0..=total / 2 {
        assert!((lr[s] + lr[total / 2 - s] - (hi + lo)).abs() < 1e-12);
        assert!((lr[s] + lr[total - s] - 2.0 * lr[s]).abs() < 1e-12);
    }
}

#[test]
fn constant_schedule_when_one_cycle_is_off() {
    let cfg = TrainConfig {
        one_cycle: false,
        ..TrainConfig::default()
    };
    let s = cfg.schedule(50);
    for step in 0..=50 {
        assert_eq!(s.at(step).unwrap(), (cfg.lr_max, cfg.optimizer.beta1));
    }
    assert_ne!(TrainConfig::default().schedule(50).at(0).unwrap(), s.at(0).unwrap());
}

#[test]
fn lr_grid_ratio_is_constant() {
    let cfg = LrFinderConfig::default();
    let r = cfg.lr_at(1) / cfg.lr_at(0);
    for i in 1..=cfg.steps {
        assert!((cfg.lr_at(i) / cfg.lr_at(i - 1) - r).abs() < 1e-12);
    }
    assert_eq!(cfg.lr_at(0), cfg.lr_min);
}

/// Gradient descent on `c/2·(x − b)²` with `b` drawn afresh per step
/// diverges once `lr > 2/c`.
#[test]
fn range_test_stops_near_the_quadratic_threshold() {
    let c = 4.0;
    let threshold = 2.0 / c;
    let cfg = LrFinderConfig {
        lr_min: 1e-4,
        lr_max: 10.0,
        steps: 100,
        ..LrFinderConfig::default()
    };
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = 1.0;
    let res = lr_range_test(&cfg, |lr| {
        let b = noise.sample(&mut rng);
        let loss = 0.5 * c * (x - b) * (x - b);
        x -= lr * c * (x - b);
        Ok(loss)
    })
    .unwrap();
    let stop = res.stop_lr.expect("early stop must fire");
    assert!(stop < cfg.lr_max);
    assert!(stop > threshold / 4.0 && stop < threshold * 4.0, "stopped at {stop}");
    let suggestion = res.suggestion.expect("suggestion");
    assert!(suggestion > cfg.lr_min && suggestion < stop);
    let last = res.points.last().unwrap();
    let best = res.points.iter().map(|p| p.smoothed).fold(f64::INFINITY, f64::min);
    assert!(last.smoothed > cfg.divergence_factor * best);
}
