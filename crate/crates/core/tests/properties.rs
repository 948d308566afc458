//! Randomized invariants of the numerical kernels, losses and metrics.

use num_rational::Ratio;
use proptest::prelude::*;

use mcncl_core::conlearn::{hard_negative_set, supcon_loss_full, supcon_loss_hard, EmbeddingBatch};
use mcncl_core::metrics::weighted_f1;
use mcncl_core::{Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn batch() -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (2usize..=12, 1usize..=6).prop_flat_map(|(n, d)| {
        (
            matrix(n, d).prop_filter("nonzero rows", |m| {
                (0..m.rows()).all(|r| m.row(r).iter().map(|v| v * v).sum::<f64>() > 1e-6)
            }),
            prop::collection::vec(0usize..3, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.softmax_lastdim(v).unwrap();
        let s = t.value(s);
        for r in 0..s.rows() {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(s.row(r).iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm((z, labels) in batch()) {
        let b = EmbeddingBatch::from_raw(&z, labels).unwrap();
        let e = b.embeddings();
        for r in 0..e.rows() {
            let n: f64 = e.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn hard_loss_never_exceeds_full((z, labels) in batch(), frac in 0.05f64..=1.0) {
        let b = EmbeddingBatch::from_raw(&z, labels).unwrap();
        let full = supcon_loss_full(&b, 0.5).unwrap();
        let hard = supcon_loss_hard(&b, 0.5, frac).unwrap();
        for (h, f) in hard.per_sample.iter().zip(&full.per_sample) {
            prop_assert_eq!(h.is_some(), f.is_some());
            if let (Some(h), Some(f)) = (h, f) {
                prop_assert!(h <= f);
            }
        }
        prop_assert!(hard.loss <= full.loss + 1e-12);
    }

    #[test]
    fn full_fraction_equals_full_loss((z, labels) in batch()) {
        let b = EmbeddingBatch::from_raw(&z, labels).unwrap();
        prop_assert_eq!(supcon_loss_hard(&b, 0.2, 1.0).unwrap(), supcon_loss_full(&b, 0.2).unwrap());
    }

    #[test]
    fn losses_invariant_under_label_bijection((z, labels) in batch()) {
        let relabel: Vec<usize> = labels.iter().map(|y| [2, 0, 1][*y]).collect();
        let a = EmbeddingBatch::from_raw(&z, labels).unwrap();
        let b = EmbeddingBatch::from_raw(&z, relabel).unwrap();
        prop_assert_eq!(supcon_loss_full(&a, 0.1).unwrap(), supcon_loss_full(&b, 0.1).unwrap());
        prop_assert_eq!(supcon_loss_hard(&a, 0.1, 0.3).unwrap(), supcon_loss_hard(&b, 0.1, 0.3).unwrap());
    }

    #[test]
    fn hard_set_is_a_subset_of_negatives((z, labels) in batch(), frac in 0.05f64..=1.0) {
        let b = EmbeddingBatch::from_raw(&z, labels.clone()).unwrap();
        for i in 0..labels.len() {
            let negatives = labels.iter().filter(|&&y| y != labels[i]).count();
            let set = hard_negative_set(&b, i, frac);
            prop_assert!(set.iter().all(|&j| labels[j] != labels[i]));
            if negatives == 0 {
                prop_assert!(set.is_empty());
            } else {
                prop_assert!(!set.is_empty() && set.len() <= negatives);
            }
        }
    }

    /// Counts must be exact and the score must equal the exact rational
    /// value up to the rounding of a handful of float operations.
    #[test]
    fn weighted_f1_against_rational_oracle(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = weighted_f1(&preds, &labels, 4).unwrap();
        let n = labels.len() as i64;
        let mut exact = Ratio::from_integer(0i64);
        for c in 0..4 {
            let tp = preds.iter().zip(&labels).filter(|(p, y)| **p == c && **y == c).count() as i64;
            let fp = preds.iter().zip(&labels).filter(|(p, y)| **p == c && **y != c).count() as i64;
            let fn_ = preds.iter().zip(&labels).filter(|(p, y)| **p != c && **y == c).count() as i64;
            let support = tp + fn_;
            prop_assert_eq!(r.per_class[c].support as i64, support);
            prop_assert_eq!(r.confusion[c][c] as i64, tp);
            if 2 * tp + fp + fn_ > 0 {
                let f1 = Ratio::new(2 * tp, 2 * tp + fp + fn_);
                exact += f1 * support;
            }
        }
        exact /= n;
        let want = *exact.numer() as f64 / *exact.denom() as f64;
        prop_assert!((r.weighted_f1 - want).abs() <= 8.0 * f64::EPSILON, "{} vs {}", r.weighted_f1, want);
    }
}
