//! Confusion matrices, per-class ratios and cross-validation aggregation.

use minet::metrics::{confusion, cv_aggregate, error_rate, macro_average, precision, recall, ConfusionMatrix, MetricsReport};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRECISION: [f64; 7] = [0.8462, 0.9412, 0.9063, 0.9565, 0.8125, 0.9, 0.963];
const RECALL: [f64; 7] = [0.8462, 0.9143, 0.9355, 0.9362, 0.9286, 0.9, 0.9286];

#[test]
fn published_table_averages() {
    assert!((macro_average(&PRECISION).unwrap() - 0.9036).abs() < 5e-4);
    assert!((macro_average(&RECALL).unwrap() - 0.9127).abs() < 5e-4);
    assert_eq!(1.0 - 0.0925, 0.9075);
    assert_eq!(macro_average(&[0.37]).unwrap(), 0.37);
    assert!(macro_average(&[]).is_err());
}

#[test]
fn eleven_of_thirteen() {
    // Class 0: 13 predicted, 11 correct; 13 true, 11 recovered.
    let cm = ConfusionMatrix {
        class_names: vec!["a".into(), "b".into()],
        counts: vec![vec![11, 2], vec![2, 20]],
    };
    assert_eq!(format!("{:.4}", precision(&cm, 0).value), "0.8462");
    assert_eq!(format!("{:.4}", recall(&cm, 0).value), "0.8462");
}

#[test]
fn three_wrong_of_twenty() {
    let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let mut preds = labels.clone();
    for p in preds.iter_mut().take(3) {
        *p = 1 - *p;
    }
    let cm = confusion(&preds, &labels, 2).unwrap();
    assert_eq!(error_rate(&cm).unwrap(), 0.15);
    let all_right = confusion(&labels, &labels, 2).unwrap();
    assert_eq!(error_rate(&all_right).unwrap(), 0.0);
}

#[test]
fn small_matrices() {
    let cm = confusion(&[0, 1], &[1, 0], 2).unwrap();
    assert_eq!(cm.counts, vec![vec![0, 1], vec![1, 0]]);
    let cm = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
    assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
    for c in 0..3 {
        assert_eq!(precision(&cm, c).value, 1.0);
        assert_eq!(recall(&cm, c).value, 1.0);
    }
    assert!(confusion(&[0], &[0, 1], 2).is_err());
    assert!(confusion(&[2], &[0], 2).is_err());
    assert!(confusion(&[], &[], 2).is_err());
}

#[test]
fn class_without_predictions_is_flagged() {
    let cm = confusion(&[0, 0, 1], &[0, 2, 1], 3).unwrap();
    let p = precision(&cm, 2);
    assert!(p.undefined);
    assert_eq!(p.value, 0.0);
    let report = MetricsReport::from_confusion(cm).unwrap();
    assert!(report.per_class[2].precision_undefined);
    assert!(report.to_text().contains("undef"));
    assert!(report.macro_precision.is_finite());
}

fn pairs() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, usize)> {
    (2usize..6, 1usize..300).prop_flat_map(|(k, n)| {
        (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n), Just(k))
    })
}

proptest! {
    #[test]
    fn matrix_matches_pair_recount((preds, labels, k) in pairs()) {
        let cm = confusion(&preds, &labels, k).unwrap();
        for t in 0..k {
            for p in 0..k {
                let n = preds.iter().zip(&labels).filter(|&(&pp, &tt)| pp == p && tt == t).count() as u64;
                prop_assert_eq!(cm.counts[t][p], n);
            }
        }
        prop_assert_eq!(cm.total(), preds.len() as u64);
        prop_assert!(cm.trace() <= cm.total());
    }

    #[test]
    fn ratios_match_brute_force((preds, labels, k) in pairs()) {
        let cm = confusion(&preds, &labels, k).unwrap();
        let report = MetricsReport::from_confusion(cm.clone()).unwrap();
        prop_assert_eq!(report.accuracy + report.error_rate, 1.0);
        let wrong = preds.iter().zip(&labels).filter(|(p, l)| p != l).count();
        prop_assert!((report.error_rate - wrong as f64 / preds.len() as f64).abs() < 1e-15);
        let mut ps = Vec::new();
        let mut rs = Vec::new();
        for c in 0..k {
            let tp = preds.iter().zip(&labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
            let fp = preds.iter().zip(&labels).filter(|&(&p, &l)| p == c && l != c).count() as f64;
            let fn_ = preds.iter().zip(&labels).filter(|&(&p, &l)| p != c && l == c).count() as f64;
            let pr = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rc = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let m = &report.per_class[c];
            prop_assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.recall));
            prop_assert_eq!(m.precision, pr);
            prop_assert_eq!(m.recall, rc);
            let clean = (0..k).all(|o| o == c || (cm.counts[c][o] == 0 && cm.counts[o][c] == 0));
            let perfect = m.precision == 1.0 && m.recall == 1.0;
            prop_assert_eq!(clean && tp > 0.0, perfect);
            ps.push(pr);
            rs.push(rc);
        }
        prop_assert!((report.macro_precision - ps.iter().sum::<f64>() / k as f64).abs() < 1e-15);
        prop_assert!((report.macro_recall - rs.iter().sum::<f64>() / k as f64).abs() < 1e-15);
    }
}

/// 100-sample, 2-class report with `wrong` errors.
fn fold_report(wrong: usize, seed: u64) -> MetricsReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..100).map(|_| rng.random_range(0..2)).collect();
    let preds: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| if i < wrong { 1 - l } else { l }).collect();
    MetricsReport::from_confusion(confusion(&preds, &labels, 2).unwrap()).unwrap()
}

#[test]
fn cross_validation_mean_and_pool() {
    let reports: Vec<MetricsReport> = [10, 8, 9, 10, 9]
        .iter()
        .enumerate()
        .map(|(i, &w)| fold_report(w, i as u64))
        .collect();
    let cv = cv_aggregate(&reports).unwrap();
    assert_eq!(cv.folds, 5);
    assert!((cv.mean.error_rate - 0.092).abs() < 1e-12);
    assert_eq!(cv.mean.accuracy, 1.0 - cv.mean.error_rate);
    for c in 0..2 {
        let manual = reports.iter().map(|r| r.per_class[c].precision).sum::<f64>() / 5.0;
        assert!((cv.mean.per_class[c].precision - manual).abs() < 1e-12);
    }
    assert_eq!(cv.pooled.confusion.total(), 500);
    assert_eq!(cv.pooled.confusion.trace(), 500 - 46);

    let same = cv_aggregate(&vec![reports[0].clone(); 3]).unwrap();
    assert_eq!(same.mean.error_rate, reports[0].error_rate);
    assert_eq!(same.mean.per_class, reports[0].per_class.iter().map(|c| {
        let mut c = c.clone();
        c.support *= 3;
        c
    }).collect::<Vec<_>>());

    let three = MetricsReport::from_confusion(confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap()).unwrap();
    assert!(cv_aggregate(&[reports[0].clone(), three]).is_err());
}

#[test]
fn confusion_export_is_a_labelled_grid() {
    let cm = confusion(&[0, 1, 1], &[0, 0, 1], 2).unwrap().with_names(vec!["quartz".into(), "pyrite".into()]).unwrap();
    let tsv = cm.to_tsv();
    let rows: Vec<Vec<&str>> = tsv.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0][1..], ["quartz", "pyrite"]);
    assert_eq!(rows[1], ["quartz", "1", "1"]);
    assert_eq!(rows[2], ["pyrite", "0", "1"]);
}
