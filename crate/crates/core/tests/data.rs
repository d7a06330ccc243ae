//! Fold planning, standardization, augmentation and the batch pipeline.

use std::collections::HashSet;

use minet::data::augment::{apply, flip_horizontal, flip_vertical};
use minet::data::{
    compute_stats, destandardize, kfold_split, kfold_split_stratified, sample_rng, standardize, synthetic_shapes,
    AugmentationPolicy, CropMode, Pipeline, PipelineMode, Split, StandardizationStats,
};
use minet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[3, h, w], (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn five_folds_of_954() {
    let plan = kfold_split(954, 5, 0).unwrap();
    let mut sizes = plan.fold_sizes();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(sizes, vec![191, 191, 191, 191, 190]);
}

fn assert_partition(n: usize, k: usize, plan: &minet::data::FoldPlan) -> Result<(), TestCaseError> {
    let mut seen = HashSet::new();
    for f in 0..k {
        let val = plan.validation_indices(f);
        let train = plan.train_indices(f);
        prop_assert_eq!(val.len() + train.len(), n);
        for i in &val {
            prop_assert!(seen.insert(*i), "index {} in two folds", i);
            prop_assert!(!train.contains(i));
        }
    }
    prop_assert_eq!(seen.len(), n);
    let sizes = plan.fold_sizes();
    prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    Ok(())
}

proptest! {
    #[test]
    fn folds_partition_the_indices(n in 2usize..400, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let plan = kfold_split(n, k, seed).unwrap();
        assert_partition(n, k, &plan)?;
        prop_assert_eq!(plan, kfold_split(n, k, seed).unwrap());
    }

    #[test]
    fn stratified_folds_partition_and_balance(
        labels in prop::collection::vec(0usize..4, 10..200),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let plan = kfold_split_stratified(&labels, k, seed).unwrap();
        assert_partition(labels.len(), k, &plan)?;
        for c in 0..4 {
            let per_fold: Vec<usize> = (0..k)
                .map(|f| plan.validation_indices(f).iter().filter(|&&i| labels[i] == c).count())
                .collect();
            prop_assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn standardize_round_trips(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let imgs: Vec<Tensor> = (0..3).map(|i| image(seed.wrapping_add(i), h, w)).collect();
        let stats = compute_stats(imgs.iter(), Split::Train).unwrap();
        for x in &imgs {
            let back = destandardize(&standardize(x, &stats).unwrap(), &stats).unwrap();
            for (a, b) in x.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn flips_are_involutions(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let x = image(seed, h, w);
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&x).unwrap()).unwrap(), x.clone());
        prop_assert_eq!(flip_vertical(&flip_vertical(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn augmented_pixels_stay_in_range(seed in any::<u64>()) {
        let x = image(seed, 12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AugmentationPolicy::default().sample(&mut rng);
        let y = apply(&x, &p).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn standardized_training_pixels_have_zero_mean_unit_std() {
    let imgs: Vec<Tensor> = (0..4).map(|i| image(i, 6, 5)).collect();
    let stats = compute_stats(imgs.iter(), Split::Train).unwrap();
    let z: Vec<Tensor> = imgs.iter().map(|x| standardize(x, &stats).unwrap()).collect();
    let again = compute_stats(z.iter(), Split::Train).unwrap();
    for c in 0..3 {
        assert!(again.mean[c].abs() < 1e-12);
        assert!((again.std[c] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn channel_stats_match_direct_computation() {
    let imgs: Vec<Tensor> = (0..3).map(|i| image(10 + i, 4, 4)).collect();
    let stats = compute_stats(imgs.iter(), Split::Train).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = imgs.iter().flat_map(|x| x.data()[c * 16..(c + 1) * 16].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((stats.mean[c] - mean).abs() < 1e-12);
        assert!((stats.std[c] - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn stats_refuse_validation_samples() {
    let imgs = [image(0, 4, 4)];
    assert!(compute_stats(imgs.iter(), Split::Validation).is_err());
    let set = synthetic_shapes(6, 8, 0).unwrap();
    assert!(set.stats(&[0, 1], Split::Validation).is_err());
}

#[test]
fn rotation_respects_its_bound() {
    let policy = AugmentationPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut rotated = 0;
    for _ in 0..1000 {
        let p = policy.sample(&mut rng);
        assert!(p.rotation_degrees.abs() <= policy.max_rotation);
        assert!((1.0..=policy.max_zoom).contains(&p.zoom));
        assert!(p.lighting.abs() <= policy.max_lighting);
        if p.rotation_degrees != 0.0 {
            rotated += 1;
        }
    }
    // rotate_p = 0.75
    assert!((650..850).contains(&rotated), "{rotated}");
}

#[test]
fn validation_pipeline_only_crops_and_standardizes() {
    let stats = StandardizationStats::new(vec![0.5; 3], vec![0.25; 3]).unwrap();
    let val = Pipeline::validation(16, 12, stats.clone()).unwrap();
    assert_eq!(val.mode(), PipelineMode::Validation);
    assert_eq!(val.crop_mode(), CropMode::Center);
    assert!(!val.augments());
    let train = Pipeline::new(PipelineMode::Train, 16, 12, AugmentationPolicy::default(), stats).unwrap();
    assert_eq!(train.crop_mode(), CropMode::Random);
    assert!(train.augments());

    let set = synthetic_shapes(6, 16, 1).unwrap();
    let idx = [0, 3, 4];
    let (a, la) = val.batch(&set, &idx, 1, 1).unwrap();
    let (b, _) = val.batch(&set, &idx, 2, 9).unwrap();
    assert_eq!(a, b, "validation batches must not depend on seed or epoch");
    assert_eq!(a.shape(), &[3, 3, 12, 12]);
    assert_eq!(la, vec![0, 0, 1]);
}

#[test]
fn training_batches_are_schedule_independent() {
    let stats = StandardizationStats::new(vec![0.5; 3], vec![0.25; 3]).unwrap();
    let pipe = Pipeline::new(PipelineMode::Train, 16, 12, AugmentationPolicy::default(), stats).unwrap();
    let set = synthetic_shapes(6, 16, 1).unwrap();
    let (ab, _) = pipe.batch(&set, &[2, 5], 7, 3).unwrap();
    let (ba, _) = pipe.batch(&set, &[5, 2], 7, 3).unwrap();
    let n = 3 * 12 * 12;
    assert_eq!(ab.data()[..n], ba.data()[n..]);
    assert_eq!(ab.data()[n..], ba.data()[..n]);
    let (other_epoch, _) = pipe.batch(&set, &[2, 5], 7, 4).unwrap();
    assert_ne!(ab, other_epoch);

    let mut r1 = sample_rng(1, 2, 3);
    let mut r2 = sample_rng(1, 2, 3);
    assert_eq!(r1.random::<u64>(), r2.random::<u64>());
}
