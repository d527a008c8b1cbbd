//! Confusion counts and the four evaluation metrics: accuracy, precision,
//! recall, F1.
//!
//! The positive class is Fractured (index 1). For two-class single-label
//! classification, micro averaging pools the per-class counts, which makes
//! precision, recall, and F1 all equal the accuracy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot compute metrics over zero samples")]
    EmptyCounts,
    #[error("prediction and label vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Outcome tallies against the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Tallies predicted vs true class indices; index 1 is positive.
    pub fn from_predictions(predictions: &[usize], labels: &[usize]) -> Result<Self, MetricsError> {
        if predictions.len() != labels.len() {
            return Err(MetricsError::LengthMismatch(
                predictions.len(),
                labels.len(),
            ));
        }
        let mut counts = ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
        };
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == 1, l == 1) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, false) => counts.tn += 1,
                (false, true) => counts.fn_ += 1,
            }
        }
        Ok(counts)
    }

    /// Same counts viewed with the negative class as positive.
    fn swapped(&self) -> Self {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    PerClass,
    Macro,
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging: Averaging,
    /// Set when a zero denominator forced precision or recall to 0.
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn positive_class_metrics(counts: &ConfusionCounts) -> (f64, f64, f64, bool) {
    let (precision, d1) = ratio(counts.tp, counts.tp + counts.fp);
    let (recall, d2) = ratio(counts.tp, counts.tp + counts.fn_);
    (precision, recall, f1_of(precision, recall), d1 || d2)
}

/// Accuracy = (TN+TP)/(TP+FP+TN+FN); precision, recall, F1 per the chosen
/// averaging. Zero-denominator precision/recall are 0 with the degenerate
/// flag set, never an error; zero total is rejected.
pub fn metrics_from_counts(
    counts: &ConfusionCounts,
    averaging: Averaging,
) -> Result<MetricsReport, MetricsError> {
    let total = counts.total();
    if total == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let accuracy = (counts.tn + counts.tp) as f64 / total as f64;
    let (precision, recall, f1, degenerate) = match averaging {
        Averaging::PerClass => positive_class_metrics(counts),
        Averaging::Macro => {
            let (pp, pr, pf, pd) = positive_class_metrics(counts);
            let (np, nr, nf, nd) = positive_class_metrics(&counts.swapped());
            ((pp + np) / 2.0, (pr + nr) / 2.0, (pf + nf) / 2.0, pd || nd)
        }
        Averaging::Micro => {
            // Pooled over both classes every prediction is one positive call:
            // TP_pooled = TP + TN and FP_pooled = FN_pooled = FP + FN, so
            // precision = recall = accuracy exactly.
            (accuracy, accuracy, accuracy, false)
        }
    };
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        averaging,
        degenerate,
    })
}

/// All three averaging views of the same counts; what evaluation persists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub counts: ConfusionCounts,
    pub micro: MetricsReport,
    pub macro_: MetricsReport,
    pub per_class: MetricsReport,
}

impl MetricsBundle {
    pub fn from_counts(counts: ConfusionCounts) -> Result<Self, MetricsError> {
        Ok(Self {
            counts,
            micro: metrics_from_counts(&counts, Averaging::Micro)?,
            macro_: metrics_from_counts(&counts, Averaging::Macro)?,
            per_class: metrics_from_counts(&counts, Averaging::PerClass)?,
        })
    }
}
