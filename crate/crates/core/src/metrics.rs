//! Confusion-matrix accumulation and the Accuracy / F1 / Precision / Recall
//! metric suite. Positive class = cancerous = `true`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2x2 confusion counts for the binary task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Merge counts from another matrix.
    pub fn accumulate(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// The four reported metrics. `None` marks an undefined value
/// (zero denominator); it is never silently replaced by 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl MetricReport {
    /// Round every defined metric to 4 decimal places for presentation.
    pub fn rounded4(&self) -> MetricReport {
        let r = |m: Option<f64>| m.map(|v| (v * 10_000.0).round() / 10_000.0);
        MetricReport {
            accuracy: r(self.accuracy),
            f1: r(self.f1),
            precision: r(self.precision),
            recall: r(self.recall),
        }
    }
}

/// Tally predictions against ground truth.
pub fn confusion(pred: &[bool], truth: &[bool]) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!(
            "prediction/truth length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Data("empty prediction list".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        match (p, t) {
            (true, true) => cm.tp += 1,
            (false, false) => cm.tn += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Compute Accuracy, F1, Precision, and Recall from confusion counts.
///
/// Accuracy = (TP+TN)/(TP+TN+FP+FN), F1 = 2TP/(2TP+FP+FN),
/// Precision = TP/(TP+FP), Recall = TP/(TP+FN). A zero denominator yields
/// `None` for that metric rather than an error.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("confusion matrix has zero total".into()));
    }
    let ratio = |num: u64, den: u64| -> Option<f64> {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Ok(MetricReport {
        accuracy: ratio(cm.tp + cm.tn, total),
        f1: ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_),
        precision: ratio(cm.tp, cm.tp + cm.fp),
        recall: ratio(cm.tp, cm.tp + cm.fn_),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_all_ones() {
        let cm = confusion(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2, 1, 0, 0));
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.f1, Some(1.0));
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(1.0));
    }

    #[test]
    fn all_false_positives() {
        let cm = confusion(&[true, true], &[false, false]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(0, 0, 2, 0));
    }

    #[test]
    fn length_mismatch_is_data_error() {
        assert!(matches!(
            confusion(&[true], &[true, false]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn empty_input_is_data_error() {
        assert!(matches!(confusion(&[], &[]), Err(Error::Data(_))));
    }

    #[test]
    fn symmetric_counts_give_half() {
        let m = compute_metrics(&ConfusionMatrix::new(1, 1, 1, 1)).unwrap();
        assert_eq!(m.accuracy, Some(0.5));
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.recall, Some(0.5));
        assert_eq!(m.f1, Some(0.5));
    }

    #[test]
    fn zero_denominator_yields_undefined_marker() {
        // tp=0, fp=0: precision undefined; recall = 0/5 = 0; accuracy = 5/10.
        let m = compute_metrics(&ConfusionMatrix::new(0, 5, 0, 5)).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.accuracy, Some(0.5));
        assert_eq!(m.f1, Some(0.0));
    }

    #[test]
    fn zero_total_is_data_error() {
        assert!(matches!(
            compute_metrics(&ConfusionMatrix::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn tally_matches_per_element_oracle() {
        // independent loop oracle over a pseudo-random 1000-element pair
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let pred: Vec<bool> = (0..1000).map(|_| next() & 1 == 1).collect();
        let truth: Vec<bool> = (0..1000).map(|_| next() & 1 == 1).collect();

        let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..1000 {
            if pred[i] && truth[i] {
                tp += 1;
            }
            if !pred[i] && !truth[i] {
                tn += 1;
            }
            if pred[i] && !truth[i] {
                fp += 1;
            }
            if !pred[i] && truth[i] {
                fn_ += 1;
            }
        }
        let cm = confusion(&pred, &truth).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(tp, tn, fp, fn_));
        assert_eq!(cm.total(), 1000);
    }

    proptest! {
        #[test]
        fn metrics_in_unit_interval(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            prop_assume!(tp + tn + fp + fn_ > 0);
            let m = compute_metrics(&ConfusionMatrix::new(tp, tn, fp, fn_)).unwrap();
            for v in [m.accuracy, m.f1, m.precision, m.recall].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn f1_harmonic_identity(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            prop_assume!(tp + tn + fp + fn_ > 0);
            let m = compute_metrics(&ConfusionMatrix::new(tp, tn, fp, fn_)).unwrap();
            if let (Some(p), Some(r)) = (m.precision, m.recall) {
                if p + r > 0.0 {
                    let harmonic = 2.0 * p * r / (p + r);
                    prop_assert!((m.f1.unwrap() - harmonic).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn scale_invariance(tp in 0u64..100, tn in 0u64..100, fp in 0u64..100, fn_ in 0u64..100, scale in 1u64..50) {
            prop_assume!(tp + tn + fp + fn_ > 0);
            let base = compute_metrics(&ConfusionMatrix::new(tp, tn, fp, fn_)).unwrap();
            let scaled = compute_metrics(&ConfusionMatrix::new(tp * scale, tn * scale, fp * scale, fn_ * scale)).unwrap();
            let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (None, None) => true,
                (Some(x), Some(y)) => (x - y).abs() < 1e-12,
                _ => false,
            };
            prop_assert!(close(base.accuracy, scaled.accuracy));
            prop_assert!(close(base.f1, scaled.f1));
            prop_assert!(close(base.precision, scaled.precision));
            prop_assert!(close(base.recall, scaled.recall));
        }
    }
}
