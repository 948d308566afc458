//! Per-modality contrastive learning on the unit sphere.
//!
//! Fused features are mapped through a two-layer projection head, normalized
//! to unit length, and scored with a supervised contrastive loss whose
//! denominator runs over the anchor's positives plus either all negatives or
//! only the hardest (most similar) fraction of them:
//!
//! ```text
//! L_i = −(1/|P_i|) Σ_{p∈P_i} log( exp(s_ip/τ) / (Σ_{n∈N_i} exp(s_in/τ) + Σ_{p∈P_i} exp(s_ip/τ)) )
//! ```
//!
//! Positives are not counted twice in the denominator, which makes the full
//! and hard-negative losses structurally identical and guarantees
//! `L_hard ≤ L_full` per sample. Non-selected negatives do not enter the hard
//! loss at all.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcn::Modality;
use crate::params::{ParamId, ParamStore};
use crate::tape::{log_sum_exp, CustomOp, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Fraction of each anchor's negatives kept as hard negatives.
    pub hard_fraction: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub projection_dim: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.07,
            hard_fraction: 0.3,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            projection_dim: 256,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(self.hard_fraction > 0.0 && self.hard_fraction <= 1.0) {
            return Err(Error::invalid("hard_fraction must lie in (0, 1]"));
        }
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("modality weights must be nonnegative"));
        }
        if self.projection_dim == 0 {
            return Err(Error::invalid("projection_dim must be positive"));
        }
        Ok(())
    }

    pub fn weight(&self, m: Modality) -> f64 {
        match m {
            Modality::Text => self.alpha,
            Modality::Audio => self.beta,
            Modality::Visual => self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

/// One projection head per modality, in [`Modality::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeadParams {
    pub heads: [ProjectionHead; 3],
}

impl ProjectionHeadParams {
    pub fn init<R: Rng>(store: &mut ParamStore, input_dim: usize, proj_dim: usize, prefix: &str, rng: &mut R) -> Self {
        let mut head = |m: Modality, rng: &mut R| {
            let n = m.name();
            ProjectionHead {
                fc1_w: store.add_uniform(
                    format!("{prefix}.{n}.fc1.weight"),
                    &[input_dim, proj_dim],
                    input_dim,
                    rng,
                ),
                fc1_b: store.add_uniform(format!("{prefix}.{n}.fc1.bias"), &[proj_dim], input_dim, rng),
                fc2_w: store.add_uniform(format!("{prefix}.{n}.fc2.weight"), &[proj_dim, proj_dim], proj_dim, rng),
                fc2_b: store.add_uniform(format!("{prefix}.{n}.fc2.bias"), &[proj_dim], proj_dim, rng),
            }
        };
        ProjectionHeadParams {
            heads: [
                head(Modality::Text, rng),
                head(Modality::Audio, rng),
                head(Modality::Visual, rng),
            ],
        }
    }

    pub fn head(&self, m: Modality) -> &ProjectionHead {
        &self.heads[m.index()]
    }
}

/// `fc2(ReLU(fc1(F)))`, `N×D → N×D_p`.
pub fn project(tape: &mut Tape, features: Var, head: &ProjectionHead) -> Result<Var> {
    let (w1, b1) = (tape.param(head.fc1_w), tape.param(head.fc1_b));
    let (w2, b2) = (tape.param(head.fc2_w), tape.param(head.fc2_b));
    let h = tape.linear(features, w1, b1)?;
    let h = tape.relu(h);
    tape.linear(h, w2, b2)
}

/// Row-wise L2 normalization; a zero row is rejected with its index.
pub fn normalize_batch(tape: &mut Tape, z: Var) -> Result<Var> {
    tape.l2_normalize_rows(z)
}

/// Unit-norm embeddings with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    embeddings: Tensor,
    labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub const NORM_TOLERANCE: f64 = 1e-9;

    pub fn new(embeddings: Tensor, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::shape(
                "embedding_batch",
                format!("{} rows for {} labels", embeddings.rows(), labels.len()),
            ));
        }
        for r in 0..embeddings.rows() {
            let norm = libm::sqrt(embeddings.row(r).iter().map(|v| v * v).sum::<f64>());
            if (norm - 1.0).abs() > Self::NORM_TOLERANCE {
                return Err(Error::invalid(format!("embedding row {r} has norm {norm}")));
            }
        }
        Ok(EmbeddingBatch { embeddings, labels })
    }

    /// Normalizes raw rows first.
    pub fn from_raw(z: &Tensor, labels: Vec<usize>) -> Result<Self> {
        let mut t = Tape::new();
        let v = t.constant(z.clone());
        let n = t.l2_normalize_rows(v)?;
        Self::new(t.value(n).clone(), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Cosine similarity, i.e. the dot product of unit rows.
    pub fn sim(&self, i: usize, j: usize) -> f64 {
        dot(self.embeddings.row(i), self.embeddings.row(j))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupConOutput {
    /// Mean over samples that have at least one positive (0 when none do).
    pub loss: f64,
    /// `None` for samples without an in-batch positive.
    pub per_sample: Vec<Option<f64>>,
    /// Set when the batch has fewer than two samples.
    pub degenerate: bool,
}

/// Number of hard negatives kept out of `num_negatives`.
pub fn hard_count(num_negatives: usize, hard_fraction: f64) -> usize {
    if num_negatives == 0 {
        return 0;
    }
    // The small offset keeps products like 0.29 · 100 from flooring to 28.
    let k = libm::floor(hard_fraction * num_negatives as f64 + 1e-9) as usize;
    k.clamp(1, num_negatives)
}

fn negatives_sorted(emb: &Tensor, labels: &[usize], i: usize) -> Vec<(usize, f64)> {
    let zi = emb.row(i);
    let mut neg: Vec<(usize, f64)> = (0..labels.len())
        .filter(|&j| labels[j] != labels[i])
        .map(|j| (j, dot(zi, emb.row(j))))
        .collect();
    // highest similarity first, lower index on ties
    neg.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    neg
}

/// Indices of the `max(1, ⌊fraction · |negatives|⌋)` negatives most similar
/// to anchor `i`, sorted ascending.
pub fn hard_negative_set(batch: &EmbeddingBatch, i: usize, hard_fraction: f64) -> Vec<usize> {
    let neg = negatives_sorted(&batch.embeddings, &batch.labels, i);
    let k = hard_count(neg.len(), hard_fraction);
    let mut set: Vec<usize> = neg[..k].iter().map(|n| n.0).collect();
    set.sort_unstable();
    set
}

/// Denominator members of anchor `i`: positives, then the selected negatives.
fn denominator(emb: &Tensor, labels: &[usize], i: usize, hard: Option<f64>) -> (Vec<usize>, Vec<usize>) {
    let pos: Vec<usize> = (0..labels.len())
        .filter(|&j| j != i && labels[j] == labels[i])
        .collect();
    let neg = negatives_sorted(emb, labels, i);
    let k = match hard {
        Some(f) => hard_count(neg.len(), f),
        None => neg.len(),
    };
    (pos, neg[..k].iter().map(|n| n.0).collect())
}

fn supcon(emb: &Tensor, labels: &[usize], tau: f64, hard: Option<f64>) -> Result<SupConOutput> {
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if let Some(f) = hard {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid("hard_fraction must lie in (0, 1]"));
        }
    }
    let n = labels.len();
    if n < 2 {
        return Ok(SupConOutput {
            loss: 0.0,
            per_sample: vec![None; n],
            degenerate: true,
        });
    }
    let mut per_sample = Vec::with_capacity(n);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let (pos, neg) = denominator(emb, labels, i, hard);
        if pos.is_empty() {
            per_sample.push(None);
            continue;
        }
        let zi = emb.row(i);
        let logits: Vec<f64> = pos.iter().chain(&neg).map(|&j| dot(zi, emb.row(j)) / tau).collect();
        let lse = log_sum_exp(&logits);
        let mean_pos = logits[..pos.len()].iter().sum::<f64>() / pos.len() as f64;
        let li = lse - mean_pos;
        per_sample.push(Some(li));
        total += li;
        count += 1;
    }
    Ok(SupConOutput {
        loss: if count == 0 { 0.0 } else { total / count as f64 },
        per_sample,
        degenerate: false,
    })
}

/// Loss over positives and all negatives.
pub fn supcon_loss_full(batch: &EmbeddingBatch, tau: f64) -> Result<SupConOutput> {
    supcon(&batch.embeddings, &batch.labels, tau, None)
}

/// Loss over positives and the hard-negative subset only.
pub fn supcon_loss_hard(batch: &EmbeddingBatch, tau: f64, hard_fraction: f64) -> Result<SupConOutput> {
    supcon(&batch.embeddings, &batch.labels, tau, Some(hard_fraction))
}

/// `α·L_text + β·L_audio + γ·L_visual`.
pub fn total_contrastive(text: f64, audio: f64, visual: f64, alpha: f64, beta: f64, gamma: f64) -> f64 {
    alpha * text + beta * audio + gamma * visual
}

struct SupConOp {
    labels: Vec<usize>,
    tau: f64,
    hard: Option<f64>,
}

impl CustomOp for SupConOp {
    fn name(&self) -> &'static str {
        "supcon"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let emb = inputs[0];
        let (n, d) = (emb.rows(), emb.cols());
        let mut dz = vec![0.0; n * d];
        if n < 2 {
            return vec![dz];
        }
        let mut anchors = Vec::new();
        for i in 0..n {
            let (pos, neg) = denominator(emb, &self.labels, i, self.hard);
            if !pos.is_empty() {
                anchors.push((i, pos, neg));
            }
        }
        if anchors.is_empty() {
            return vec![dz];
        }
        let scale = grad_out[0] / anchors.len() as f64;
        for (i, pos, neg) in anchors {
            let zi = emb.row(i);
            let members: Vec<usize> = pos.iter().chain(&neg).copied().collect();
            let logits: Vec<f64> = members.iter().map(|&j| dot(zi, emb.row(j)) / self.tau).collect();
            let lse = log_sum_exp(&logits);
            for (m, &j) in members.iter().enumerate() {
                let w = libm::exp(logits[m] - lse);
                let target = if m < pos.len() { 1.0 / pos.len() as f64 } else { 0.0 };
                // dL/ds_ij, with s_ij = z_i · z_j
                let c = scale * (w - target) / self.tau;
                for k in 0..d {
                    dz[i * d + k] += c * emb.get(j, k);
                    dz[j * d + k] += c * emb.get(i, k);
                }
            }
        }
        vec![dz]
    }
}

/// Records the contrastive loss of unit rows `z` on the tape (scalar output).
/// `hard` selects hard-negative mining with the given fraction.
pub fn supcon_on_tape(tape: &mut Tape, z: Var, labels: &[usize], tau: f64, hard: Option<f64>) -> Result<Var> {
    let emb = tape.value(z);
    if emb.rows() != labels.len() {
        return Err(Error::shape(
            "supcon",
            format!("{} rows for {} labels", emb.rows(), labels.len()),
        ));
    }
    let out = supcon(emb, labels, tau, hard)?;
    let op = SupConOp {
        labels: labels.to_vec(),
        tau,
        hard,
    };
    Ok(tape.custom(&[z], Tensor::scalar(out.loss), Box::new(op)))
}

/// Projection, normalization and hard-negative loss for one modality.
pub fn modality_loss(
    tape: &mut Tape,
    features: Var,
    head: &ProjectionHead,
    labels: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    let z = project(tape, features, head)?;
    let z = normalize_batch(tape, z)?;
    supcon_on_tape(tape, z, labels, cfg.temperature, Some(cfg.hard_fraction))
}
