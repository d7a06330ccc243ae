//! Confusion matrices, error rate, per-class precision/recall and
//! cross-validation aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

fn default_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

/// Tallies `(label, pred)` pairs.
pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Metrics(format!(
            "need equal non-empty prediction/label lists, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(default_names(k))?;
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::LabelOutOfRange {
                label: p.max(t),
                classes: k,
            });
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

impl ConfusionMatrix {
    pub fn zeros(class_names: Vec<String>) -> Result<Self> {
        let k = class_names.len();
        if k == 0 {
            return Err(Error::Metrics("confusion matrix needs at least one class".into()));
        }
        Ok(ConfusionMatrix {
            class_names,
            counts: vec![vec![0; k]; k],
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.k() {
            return Err(Error::Metrics(format!("{} names for {} classes", names.len(), self.k())));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn column_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Element-wise sum, for pooling folds.
    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k() != self.k() {
            return Err(Error::Metrics(format!("cannot add {}x{} to {}x{}", other.k(), other.k(), self.k(), self.k())));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }

    /// Tab-separated grid with class names as header row and column.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("true\\pred");
        for n in &self.class_names {
            out.push('\t');
            out.push_str(n);
        }
        out.push('\n');
        for (n, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(n);
            for v in row {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// `(total − trace) / total`.
pub fn error_rate(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Metrics("error rate of an empty confusion matrix".into()));
    }
    Ok((total - cm.trace()) as f64 / total as f64)
}

/// A ratio whose denominator may be zero. Undefined ratios carry value 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub undefined: bool,
}

fn ratio(num: u64, den: u64) -> Ratio {
    if den == 0 {
        Ratio {
            value: 0.0,
            undefined: true,
        }
    } else {
        Ratio {
            value: num as f64 / den as f64,
            undefined: false,
        }
    }
}

/// True positives over predicted positives for class `c`.
pub fn precision(cm: &ConfusionMatrix, c: usize) -> Ratio {
    ratio(cm.counts[c][c], cm.column_sum(c))
}

/// True positives over actual members of class `c`.
pub fn recall(cm: &ConfusionMatrix, c: usize) -> Ratio {
    ratio(cm.counts[c][c], cm.row_sum(c))
}

/// Unweighted mean.
pub fn macro_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metrics("macro average of an empty list".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub error_rate: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        let error_rate = error_rate(&cm)?;
        let per_class: Vec<ClassMetrics> = (0..cm.k())
            .map(|c| {
                let (p, r) = (precision(&cm, c), recall(&cm, c));
                ClassMetrics {
                    name: cm.class_names[c].clone(),
                    precision: p.value,
                    recall: r.value,
                    precision_undefined: p.undefined,
                    recall_undefined: r.undefined,
                    support: cm.row_sum(c),
                }
            })
            .collect();
        Self::assemble(error_rate, per_class, cm)
    }

    fn assemble(error_rate: f64, per_class: Vec<ClassMetrics>, confusion: ConfusionMatrix) -> Result<Self> {
        let p: Vec<f64> = per_class.iter().map(|c| c.precision).collect();
        let r: Vec<f64> = per_class.iter().map(|c| c.recall).collect();
        Ok(MetricsReport {
            error_rate,
            accuracy: 1.0 - error_rate,
            macro_precision: macro_average(&p)?,
            macro_recall: macro_average(&r)?,
            per_class,
            confusion,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    /// Per-class table plus summary block, rounded to 4 decimals.
    pub fn to_text(&self) -> String {
        let width = self.per_class.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  precision  recall  support\n", "class");
        for c in &self.per_class {
            let mark = |v: f64, undef: bool| {
                if undef {
                    format!("{:>9}", "undef")
                } else {
                    format!("{v:>9.4}")
                }
            };
            let _ = writeln!(
                out,
                "{:<width$}  {}  {:>6}  {:>7}",
                c.name,
                mark(c.precision, c.precision_undefined),
                mark(c.recall, c.recall_undefined).trim_start(),
                c.support
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "error_rate         {:.4}", self.error_rate);
        let _ = writeln!(out, "accuracy           {:.4}", self.accuracy);
        let _ = writeln!(out, "average_precision  {:.4}", self.macro_precision);
        let _ = writeln!(out, "average_recall     {:.4}", self.macro_recall);
        out
    }
}

/// Both cross-validation views: the unweighted mean of the fold reports, and
/// a report derived from the summed confusion matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: usize,
    pub mean: MetricsReport,
    pub pooled: MetricsReport,
}

/// Averages `reports` metric by metric. Accuracy stays `1 − error_rate` and
/// the macro figures stay the mean of the averaged per-class values.
pub fn cv_aggregate(reports: &[MetricsReport]) -> Result<CvSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Metrics("nothing to aggregate".into()))?;
    let k = first.num_classes();
    if let Some(r) = reports.iter().find(|r| r.num_classes() != k) {
        return Err(Error::Metrics(format!(
            "inconsistent class counts: {k} and {}",
            r.num_classes()
        )));
    }
    let n = reports.len() as f64;
    // Shifted by the first fold, so identical folds average to themselves exactly.
    let mean_of = |f: &dyn Fn(&MetricsReport) -> f64| {
        let base = f(first);
        base + reports.iter().map(|r| f(r) - base).sum::<f64>() / n
    };
    let mut pooled = first.confusion.clone();
    for r in &reports[1..] {
        pooled.add(&r.confusion)?;
    }
    let per_class = (0..k)
        .map(|c| ClassMetrics {
            name: first.per_class[c].name.clone(),
            precision: mean_of(&|r| r.per_class[c].precision),
            recall: mean_of(&|r| r.per_class[c].recall),
            precision_undefined: reports.iter().any(|r| r.per_class[c].precision_undefined),
            recall_undefined: reports.iter().any(|r| r.per_class[c].recall_undefined),
            support: reports.iter().map(|r| r.per_class[c].support).sum(),
        })
        .collect();
    let mean = MetricsReport::assemble(mean_of(&|r| r.error_rate), per_class, pooled.clone())?;
    Ok(CvSummary {
        folds: reports.len(),
        mean,
        pooled: MetricsReport::from_confusion(pooled)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_swap() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(cm.trace(), 3);
        for c in 0..3 {
            assert_eq!(precision(&cm, c).value, 1.0);
            assert_eq!(recall(&cm, c).value, 1.0);
        }
        let swap = confusion(&[0, 1], &[1, 0], 2).unwrap();
        assert_eq!(swap.counts, vec![vec![0, 1], vec![1, 0]]);
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[2], &[0], 2).is_err());
        assert!(confusion(&[], &[], 2).is_err());
    }

    #[test]
    fn error_rate_counts() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let mut preds = labels.clone();
        for p in preds.iter_mut().take(3) {
            *p = 1 - *p;
        }
        let cm = confusion(&preds, &labels, 2).unwrap();
        assert_eq!(error_rate(&cm).unwrap(), 0.15);
        let empty = ConfusionMatrix::zeros(default_names(2)).unwrap();
        assert!(error_rate(&empty).is_err());
    }

    #[test]
    fn eleven_of_thirteen() {
        let mut cm = ConfusionMatrix::zeros(default_names(2)).unwrap();
        cm.counts = vec![vec![11, 2], vec![2, 5]];
        assert!((precision(&cm, 0).value - 0.8462).abs() < 5e-5);
        assert!((recall(&cm, 0).value - 0.8462).abs() < 5e-5);
    }

    #[test]
    fn undefined_precision_is_flagged() {
        let cm = confusion(&[0, 0], &[0, 1], 3).unwrap();
        let r = MetricsReport::from_confusion(cm).unwrap();
        assert!(r.per_class[1].precision_undefined);
        assert_eq!(r.per_class[1].precision, 0.0);
        assert!(r.per_class[2].recall_undefined);
        assert!(r.to_text().contains("undef"));
    }

    #[test]
    fn aggregate_of_identical_reports() {
        let cm = confusion(&[0, 1, 1, 0], &[0, 1, 0, 0], 2).unwrap();
        let r = MetricsReport::from_confusion(cm).unwrap();
        let s = cv_aggregate(&[r.clone(), r.clone(), r.clone()]).unwrap();
        assert!((s.mean.error_rate - r.error_rate).abs() < 1e-15);
        for (a, b) in s.mean.per_class.iter().zip(&r.per_class) {
            assert!((a.precision - b.precision).abs() < 1e-15);
            assert!((a.recall - b.recall).abs() < 1e-15);
            assert_eq!(a.support, 3 * b.support);
        }
        assert_eq!(s.pooled.confusion.total(), 12);
        assert!(cv_aggregate(&[]).is_err());
    }

    #[test]
    fn tsv_layout() {
        let cm = confusion(&[0, 1], &[1, 1], 2).unwrap().with_names(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(cm.to_tsv(), "true\\pred\ta\tb\na\t0\t0\nb\t1\t1\n");
    }
}
