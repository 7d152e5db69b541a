//! Confusion matrices and micro/macro/weighted F1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions but {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class id {id} out of range for {classes} classes")]
    OutOfRange { id: usize, classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
}

/// Counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn diagonal_sum(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.diagonal_sum() as f64 / self.total() as f64
    }

    fn row_sum(&self, truth: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(truth, p)).sum()
    }

    fn col_sum(&self, pred: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, pred)).sum()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (&p, &t) in preds.iter().zip(labels) {
        for id in [p, t] {
            if id >= num_classes {
                return Err(MetricsError::OutOfRange {
                    id,
                    classes: num_classes,
                });
            }
        }
        cm.counts[t * num_classes + p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class_f1: Vec<f64>,
    pub support: Vec<u64>,
    pub micro: f64,
    pub macro_f1: f64,
    pub weighted: f64,
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else if precision == recall {
        // Exact in this case, where the general formula may round.
        precision
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Classes with no true rows are left out of the macro and weighted means.
pub fn f1_report(cm: &ConfusionMatrix) -> Result<F1Report, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let k = cm.num_classes();
    let mut per_class_f1 = Vec::with_capacity(k);
    let mut support = Vec::with_capacity(k);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for c in 0..k {
        let tp = cm.get(c, c);
        let fp = cm.col_sum(c) - tp;
        let fn_ = cm.row_sum(c) - tp;
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        per_class_f1.push(f1(tp, fp, fn_));
        support.push(tp + fn_);
    }
    let present: Vec<usize> = (0..k).filter(|&c| support[c] > 0).collect();
    let macro_f1 = present.iter().map(|&c| per_class_f1[c]).sum::<f64>() / present.len() as f64;
    let weighted = present
        .iter()
        .map(|&c| per_class_f1[c] * support[c] as f64)
        .sum::<f64>()
        / total as f64;
    Ok(F1Report {
        micro: f1(tp_all, fp_all, fn_all),
        per_class_f1,
        support,
        macro_f1,
        weighted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_row_example() {
        let cm = confusion(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 1));
        let r = f1_report(&cm).unwrap();
        for v in [r.per_class_f1[0], r.per_class_f1[1], r.micro, r.macro_f1, r.weighted] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 2, 1];
        let r = f1_report(&confusion(&labels, &labels, 3).unwrap()).unwrap();
        assert_eq!(r.per_class_f1, vec![1.0; 3]);
        assert_eq!((r.micro, r.macro_f1, r.weighted), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_and_bad_inputs() {
        let cm = confusion(&[], &[], 9).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(f1_report(&cm), Err(MetricsError::Empty));
        assert!(confusion(&[0], &[], 9).is_err());
        assert!(confusion(&[9], &[0], 9).is_err());
    }

    #[test]
    fn zero_support_classes_leave_macro_alone() {
        // Class 2 is never the true label but is predicted once.
        let r = f1_report(&confusion(&[0, 2], &[0, 1], 3).unwrap()).unwrap();
        assert_eq!(r.support, vec![1, 1, 0]);
        assert_eq!(r.macro_f1, 0.5);
        assert_eq!(r.weighted, 0.5);
    }
}
