//! Fusion classifier: `[f_text, f_audio, f_visual] → FC → MLP → softmax`.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{log_sum_exp, softmax_in_place, CustomOp, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden_dim: usize,
    pub mlp_dim: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden_dim: 256,
            mlp_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub num_classes: usize,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub mlp1_w: ParamId,
    pub mlp1_b: ParamId,
    pub mlp2_w: ParamId,
    pub mlp2_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl ClassifierParams {
    /// `feature_dim` is the width of each modality feature.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        feature_dim: usize,
        cfg: &ClassifierConfig,
        num_classes: usize,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        if cfg.hidden_dim == 0 || cfg.mlp_dim == 0 {
            return Err(Error::invalid("classifier widths must be positive"));
        }
        let d3 = 3 * feature_dim;
        let (h, h2) = (cfg.hidden_dim, cfg.mlp_dim);
        Ok(ClassifierParams {
            num_classes,
            fc_w: store.add_uniform(format!("{prefix}.fc.weight"), &[d3, h], d3, rng),
            fc_b: store.add_uniform(format!("{prefix}.fc.bias"), &[h], d3, rng),
            mlp1_w: store.add_uniform(format!("{prefix}.mlp1.weight"), &[h, h], h, rng),
            mlp1_b: store.add_uniform(format!("{prefix}.mlp1.bias"), &[h], h, rng),
            mlp2_w: store.add_uniform(format!("{prefix}.mlp2.weight"), &[h, h2], h, rng),
            mlp2_b: store.add_uniform(format!("{prefix}.mlp2.bias"), &[h2], h, rng),
            out_w: store.add_uniform(format!("{prefix}.softmax.weight"), &[h2, num_classes], h2, rng),
            out_b: store.add_uniform(format!("{prefix}.softmax.bias"), &[num_classes], h2, rng),
        })
    }
}

/// Pre-softmax scores `N×K` for `N×D` modality features.
pub fn logits(tape: &mut Tape, text: Var, audio: Var, visual: Var, params: &ClassifierParams) -> Result<Var> {
    for v in [text, audio, visual] {
        if !tape.value(v).is_finite() {
            return Err(Error::NonFinite {
                what: "classifier input".into(),
            });
        }
    }
    let concat = tape.concat_cols(&[text, audio, visual])?;
    let (w, b) = (tape.param(params.fc_w), tape.param(params.fc_b));
    let h = tape.linear(concat, w, b)?;
    let (w, b) = (tape.param(params.mlp1_w), tape.param(params.mlp1_b));
    let h = tape.linear(h, w, b)?;
    let h = tape.relu(h);
    let (w, b) = (tape.param(params.mlp2_w), tape.param(params.mlp2_b));
    let h = tape.linear(h, w, b)?;
    let h = tape.relu(h);
    let (w, b) = (tape.param(params.out_w), tape.param(params.out_b));
    tape.linear(h, w, b)
}

/// Class probabilities `N×K`.
pub fn classify(tape: &mut Tape, text: Var, audio: Var, visual: Var, params: &ClassifierParams) -> Result<Var> {
    let l = logits(tape, text, audio, visual, params)?;
    tape.softmax_lastdim(l)
}

/// Index of the largest entry, first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise predictions from an `N×K` score matrix.
pub fn predictions(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows()).map(|r| argmax(scores.row(r))).collect()
}

/// `−log probs[label]`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::Label {
            label,
            num_classes: probs.len(),
        });
    }
    Ok(-libm::log(probs[label]))
}

/// `LSE(logits) − logits[label]`, the stable form of `−log softmax(logits)[label]`.
pub fn cross_entropy_from_logits(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Label {
            label,
            num_classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

struct CrossEntropyOp {
    labels: Vec<usize>,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let logits = inputs[0];
        let k = logits.cols();
        let n = self.labels.len();
        let mut d = logits.data().to_vec();
        for (r, row) in d.chunks_exact_mut(k).enumerate() {
            softmax_in_place(row);
            row[self.labels[r]] -= 1.0;
            for v in row.iter_mut() {
                *v *= grad_out[0] / n as f64;
            }
        }
        alloc::vec![d]
    }
}

/// Mean cross-entropy of `N×K` logits against `labels` (scalar output).
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let l = tape.value(logits);
    if l.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} rows for {} labels", l.rows(), labels.len()),
        ));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        total += cross_entropy_from_logits(l.row(r), y)?;
    }
    let mean = total / labels.len() as f64;
    let op = CrossEntropyOp {
        labels: labels.to_vec(),
    };
    Ok(tape.custom(&[logits], Tensor::scalar(mean), Box::new(op)))
}

/// `ce + λ · contrast`.
pub fn total_loss(ce: f64, contrast: f64, lambda: f64) -> f64 {
    ce + lambda * contrast
}

pub fn total_loss_on_tape(tape: &mut Tape, ce: Var, contrast: Option<Var>, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be nonnegative"));
    }
    match contrast {
        Some(c) => tape.combine(&[(ce, 1.0), (c, lambda)]),
        None => Ok(ce),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng;

    fn setup(d: usize, k: usize, seed: u64) -> (ParamStore, ClassifierParams) {
        let mut store = ParamStore::new();
        let cfg = ClassifierConfig {
            hidden_dim: 5,
            mlp_dim: 4,
        };
        let p = ClassifierParams::init(&mut store, d, &cfg, k, "cls", &mut rng::seeded(seed)).unwrap();
        (store, p)
    }

    fn random(rows: usize, cols: usize, r: &mut rng::Rng) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_uniform() {
        let (mut store, p) = setup(3, 6, 1);
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut t = Tape::with_params(&store);
        let mut r = rng::seeded(2);
        let f: Vec<Var> = (0..3).map(|_| t.constant(random(2, 3, &mut r))).collect();
        let probs = classify(&mut t, f[0], f[1], f[2], &p).unwrap();
        assert_eq!(t.value(probs).shape(), &[2, 6]);
        for &v in t.value(probs).data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_composed_oracle_and_sums_to_one() {
        let (store, p) = setup(3, 4, 3);
        let mut r = rng::seeded(4);
        let feats: Vec<Tensor> = (0..3).map(|_| random(2, 3, &mut r)).collect();
        let mut t = Tape::with_params(&store);
        let f: Vec<Var> = feats.iter().map(|x| t.constant(x.clone())).collect();
        let probs = classify(&mut t, f[0], f[1], f[2], &p).unwrap();

        let affine = |x: &[f64], w: &Tensor, b: &Tensor, relu: bool| -> Vec<f64> {
            (0..w.cols())
                .map(|j| {
                    let mut s = b.data()[j];
                    for (i, xv) in x.iter().enumerate() {
                        s += xv * w.get(i, j);
                    }
                    if relu {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .collect()
        };
        for row in 0..2 {
            let mut concat = Vec::new();
            for f in &feats {
                concat.extend_from_slice(f.row(row));
            }
            let h = affine(&concat, store.get(p.fc_w), store.get(p.fc_b), false);
            let h = affine(&h, store.get(p.mlp1_w), store.get(p.mlp1_b), true);
            let h = affine(&h, store.get(p.mlp2_w), store.get(p.mlp2_b), true);
            let z = affine(&h, store.get(p.out_w), store.get(p.out_b), false);
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            for (k, v) in z.iter().enumerate() {
                assert!((t.value(probs).get(row, k) - (v - m).exp() / s).abs() < 1e-12);
            }
            let sum: f64 = t.value(probs).row(row).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let (store, p) = setup(2, 3, 5);
        let mut t = Tape::with_params(&store);
        let a = t.constant(Tensor::from_rows(&[&[f64::NAN, 0.0]]).unwrap());
        let b = t.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(classify(&mut t, a, b, b, &p), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn argmax_stable_under_shift() {
        let z = [0.3, 2.0, -1.0, 2.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 100.0).collect();
        assert_eq!(argmax(&z), 1);
        assert_eq!(argmax(&shifted), 1);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((4f64.ln() - 1.3863).abs() < 1e-4);
        assert!(matches!(cross_entropy(&[0.5, 0.5], 2), Err(Error::Label { .. })));
        let mut r = rng::seeded(6);
        for _ in 0..20 {
            let z: Vec<f64> = (0..5).map(|_| r.random_range(-5.0..5.0)).collect();
            let mut p = z.clone();
            softmax_in_place(&mut p);
            let y = r.random_range(0..5);
            let a = cross_entropy_from_logits(&z, y).unwrap();
            assert!((a + p[y].ln()).abs() < 1e-12);
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.7, 5.0, 0.0), 0.7);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
    }

    #[test]
    fn gradient_check_head_with_cross_entropy() {
        let (mut store, p) = setup(3, 3, 7);
        let mut r = rng::seeded(8);
        let feats: Vec<Tensor> = (0..3).map(|_| random(4, 3, &mut r)).collect();
        let labels = [0usize, 2, 1, 2];
        let rep = grad_check(&mut store, 1e-6, 1e-6, |t| {
            let f: Vec<Var> = feats.iter().map(|x| t.constant(x.clone())).collect();
            let z = logits(t, f[0], f[1], f[2], &p)?;
            cross_entropy_on_tape(t, z, &labels)
        })
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn linear_softmax_ce_gradient() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(9);
        let w = store.add_uniform("w", &[2, 4], 2, &mut r);
        let b = store.add_uniform("b", &[2], 1, &mut r);
        // 2x4 weights plus a 2-dim bias lifted to 4 classes: 10 checked scalars
        let lift = Tensor::from_rows(&[&[1.0, 0.0, 1.0, 0.0], &[0.0, 1.0, 0.0, -1.0]]).unwrap();
        let x = random(5, 2, &mut r);
        let labels = [0usize, 1, 2, 3, 1];
        let rep = grad_check(&mut store, 1e-6, 1e-6, |t| {
            let xv = t.constant(x.clone());
            let l = t.constant(lift.clone());
            let bv = t.param(b);
            let b2 = t.matmul(bv, l)?;
            let xw = t.matmul(xv, t.param(w))?;
            let bias = t.slice_rows(b2, 0, 1)?;
            let z = t.add_bias(xw, bias)?;
            cross_entropy_on_tape(t, z, &labels)
        })
        .unwrap();
        assert_eq!(rep.checked, 10);
        assert!(rep.passed(), "{rep:?}");
    }
}
