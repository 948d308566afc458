//! Per-class precision/recall/F1, support-weighted F1 and the confusion matrix.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_f1: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn total(&self) -> u64 {
        self.per_class.iter().map(|c| c.support).sum()
    }
}

/// Builds the report for `predictions` against `labels` over `num_classes` classes.
///
/// Undefined precision or recall (no predicted / no true members) counts as 0,
/// and so does the F1 of a class where both are 0.
pub fn weighted_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "weighted_f1",
            alloc::format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("weighted_f1 of an empty evaluation"));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        for c in [p, y] {
            if c >= num_classes {
                return Err(Error::Label { label: c, num_classes });
            }
        }
        confusion[y][p] += 1;
    }
    let n = labels.len() as f64;
    let mut per_class = Vec::with_capacity(num_classes);
    let mut weighted = 0.0;
    let mut correct = 0u64;
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        // 2PR/(P+R) reduces to 2TP/(2TP+FP+FN), which needs one rounding only.
        let f1 = ratio(2 * tp, predicted + support);
        weighted += support as f64 * f1;
        correct += tp;
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
        });
    }
    Ok(EvalReport {
        num_classes,
        per_class,
        weighted_f1: weighted / n,
        accuracy: correct as f64 / n,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect() {
        let r = weighted_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(r.weighted_f1, 1.0);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn two_class_example() {
        let r = weighted_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.per_class[0].precision, 1.0);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[1].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[1].recall, 1.0);
        assert!((r.per_class[1].f1 - 0.8).abs() < 1e-15);
        assert!((r.weighted_f1 - (0.5 * 2.0 / 3.0 + 0.5 * 0.8)).abs() < 1e-15);
        assert!((r.weighted_f1 - 0.7333).abs() < 1e-4);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn absent_class_scores_zero() {
        let r = weighted_f1(&[0, 0, 0], &[0, 1, 0], 3).unwrap();
        assert_eq!(r.per_class[1].f1, 0.0);
        assert_eq!(r.per_class[2].f1, 0.0);
        assert_eq!(r.per_class[2].support, 0);
        assert_eq!(r.total(), 3);
    }

    #[test]
    fn errors() {
        assert!(weighted_f1(&[], &[], 2).is_err());
        assert!(weighted_f1(&[0], &[0, 1], 2).is_err());
        assert!(matches!(weighted_f1(&[3], &[0], 2), Err(Error::Label { .. })));
    }
}
