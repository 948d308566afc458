//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass in execution order.
//! [`Tape::backward`] walks the records in exact reverse order, so inputs
//! always precede their consumers and each node's gradient is complete before
//! it is propagated. Operations work on whole tensors; there is no
//! broadcasting beyond bias addition ([`Tape::add_bias`]) and per-channel
//! scaling ([`Tape::mul_row`]).
//!
//! A tape belongs to one forward/backward pass and is dropped afterwards.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation whose forward pass is computed outside the tape.
///
/// Used for fused losses (cross-entropy from logits, supervised contrastive)
/// whose closed-form gradient is simpler and more accurate than composing
/// primitives.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, each the size of that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Combine(Vec<(Var, f64)>),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records every tensor of `store` as a trainable leaf, reachable via [`Tape::param`].
    pub fn with_params(store: &ParamStore) -> Self {
        let mut tape = Self::new();
        tape.params = store
            .tensors()
            .iter()
            .map(|t| tape.push(t.clone(), Op::Leaf, true))
            .collect();
        tape
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    /// Trainable leaf outside any parameter store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`]; `None` for nodes
    /// that do not depend on any trainable leaf or were not reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a trainable leaf, zero-filled when the loss does not depend on it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.numel()],
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---------------------------------------------------------------------
    // Operations
    // ---------------------------------------------------------------------

    /// `a · b` for `a: n×k`, `b: k×m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", alloc::format!("{n}x{k} times {k2}x{m}")));
        }
        let out = gemm_nn(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: n×k`, `b: m×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_t", alloc::format!("{n}x{k} times ({m}x{k2})^T")));
        }
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMulT(a, b), rg))
    }

    /// Adds a length-`m` bias to every row of an `n×m` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        let b = self.value(bias);
        if b.numel() != m {
            return Err(Error::shape(
                "add_bias",
                alloc::format!("bias of {} for {} columns", b.numel(), m),
            ));
        }
        let bd = b.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(m.max(1)) {
            for (o, b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::AddBias(x, bias), rg))
    }

    /// Affine map `x · weight + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_bias(xw, bias)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, alloc::format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Per-channel scaling: every row of `x: n×m` multiplied by `w` (length `m`).
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        let wv = self.value(w);
        if wv.numel() != m {
            return Err(Error::shape(
                "mul_row",
                alloc::format!("{} weights for {} columns", wv.numel(), m),
            ));
        }
        let wd = wv.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(m.max(1)) {
            for (o, w) in row.iter_mut().zip(wd) {
                *o *= w;
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MulRow(x, w), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect()).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect()).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| sigmoid(a)).collect()).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Row-wise softmax over the last dimension, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if m == 0 {
            return Err(Error::invalid("softmax over empty last dimension"));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(m) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::SoftmaxRows(x), rg))
    }

    /// Per-row normalization to zero mean and unit (biased) variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims(x);
        if d == 0 {
            return Err(Error::invalid("layer_norm over empty row"));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != d || b.numel() != d {
            return Err(Error::shape(
                "layer_norm",
                alloc::format!("gain {} / bias {} for width {}", g.numel(), b.numel(), d),
            ));
        }
        let (gd, bd) = (g.data(), b.data());
        let xd = self.value(x).data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = gd[c] * h + bd[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::matrix(n, d, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if !(norm > 0.0) {
                return Err(Error::ZeroNorm { row: r });
            }
            for c in 0..d {
                out[r * d + c] = row[c] / norm;
            }
            norms.push(norm);
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Temporal cross-correlation with zero "same" padding.
    ///
    /// `x: L×C_in`, `kernel: [k, C_in, C_out]` with odd `k`, `bias: C_out`;
    /// `y[t, o] = bias[o] + Σ_j Σ_i x[t + j − k/2, i] · kernel[j, i, o]`.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (len, cin) = self.dims(x);
        let ks = self.value(kernel).shape().to_vec();
        if ks.len() != 3 || ks[1] != cin {
            return Err(Error::shape(
                "conv1d",
                alloc::format!("kernel {ks:?} for {cin} input channels"),
            ));
        }
        let (k, cout) = (ks[0], ks[2]);
        if k % 2 == 0 {
            return Err(Error::invalid(alloc::format!(
                "conv1d kernel size {k} must be odd for same padding"
            )));
        }
        if self.value(bias).numel() != cout {
            return Err(Error::shape(
                "conv1d",
                alloc::format!("bias {} for {} outputs", self.value(bias).numel(), cout),
            ));
        }
        let out = conv1d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            len,
            cin,
            cout,
            k,
        );
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(Tensor::matrix(len, cout, out)?, Op::Conv1d { x, kernel, bias }, rg))
    }

    /// Grouped same-padded temporal convolution.
    ///
    /// The channels of `x: L×C` are split into `kernels.len()` contiguous
    /// groups of equal width; group `g` is convolved with `kernels[g]`
    /// (shape `[k_g, C/G, C/G]`, odd `k_g`) and `biases[g]`, and the group
    /// outputs are concatenated back along channels.
    pub fn conv1d_grouped(&mut self, x: Var, kernels: &[Var], biases: &[Var]) -> Result<Var> {
        let groups = kernels.len();
        let c = self.dims(x).1;
        if groups == 0 || groups != biases.len() {
            return Err(Error::invalid(alloc::format!(
                "{} kernels and {} biases",
                groups,
                biases.len()
            )));
        }
        if !c.is_multiple_of(groups) {
            return Err(Error::invalid(alloc::format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        let width = c / groups;
        let mut outs = Vec::with_capacity(groups);
        for (g, (&k, &b)) in kernels.iter().zip(biases).enumerate() {
            let xs = if groups == 1 {
                x
            } else {
                self.slice_cols(x, g * width, width)?
            };
            outs.push(self.conv1d_same(xs, k, b)?);
        }
        if groups == 1 {
            return Ok(outs[0]);
        }
        self.concat_cols(&outs)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (n, m) = self.dims(x);
        if start + width > m {
            return Err(Error::shape(
                "slice_cols",
                alloc::format!("{start}..{} of {m} columns", start + width),
            ));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * width);
        for r in 0..n {
            out.extend_from_slice(&xd[r * m + start..r * m + start + width]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(n, width, out)?, Op::SliceCols { x, start }, rg))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.dims(p).0,
            None => return Err(Error::invalid("concat_cols of nothing")),
        };
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        for &p in parts {
            if self.dims(p).0 != n {
                return Err(Error::shape(
                    "concat_cols",
                    alloc::format!("row counts {} and {}", n, self.dims(p).0),
                ));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(n, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (n, m) = self.dims(x);
        if start + count > n {
            return Err(Error::shape(
                "slice_rows",
                alloc::format!("{start}..{} of {n} rows", start + count),
            ));
        }
        let out = self.value(x).data()[start * m..(start + count) * m].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(count, m, out)?, Op::SliceRows { x, start }, rg))
    }

    /// Stacks matrices (or vectors, as single rows) with equal widths.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.dims(p).1,
            None => return Err(Error::invalid("concat_rows of nothing")),
        };
        let mut n = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != m {
                return Err(Error::shape("concat_rows", alloc::format!("widths {m} and {c}")));
            }
            n += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Arithmetic mean over rows: `n×m → 1×m`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if n == 0 {
            return Err(Error::invalid("mean over zero rows"));
        }
        let mut out = vec![0.0; m];
        for row in self.value(x).data().chunks_exact(m.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(1, m, out)?, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ wᵢ · xᵢ` over same-shaped inputs.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = match terms.first() {
            Some(&(v, _)) => v,
            None => return Err(Error::invalid("combine of nothing")),
        };
        for &(v, _) in terms {
            self.check_same("combine", first, v)?;
        }
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for &(v, w) in terms {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::new(shape, out)?, Op::Combine(terms.to_vec()), rg))
    }

    /// Records an externally computed `output` with a user-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Back-propagates from a scalar `loss`, replacing any earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                alloc::format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let contribs = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contribs {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&cg) {
                            *a += c;
                        }
                    }
                    None => node.grad = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::MatMul(a, b) => {
                let (n, k) = self.dims(a);
                let m = self.dims(b).1;
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                vec![(a, gemm_nt(g, bd, n, m, k)), (b, gemm_tn(ad, g, k, n, m))]
            }
            &Op::MatMulT(a, b) => {
                let (n, k) = self.dims(a);
                let m = self.dims(b).0;
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                vec![(a, gemm_nn(g, bd, n, m, k)), (b, gemm_tn(g, ad, m, n, k))]
            }
            &Op::AddBias(x, b) => {
                let m = self.dims(x).1;
                let mut db = vec![0.0; m];
                for row in g.chunks_exact(m.max(1)) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(x, g.to_vec()), (b, db)]
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Mul(a, b) => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                vec![
                    (a, g.iter().zip(bd).map(|(g, b)| g * b).collect()),
                    (b, g.iter().zip(ad).map(|(g, a)| g * a).collect()),
                ]
            }
            &Op::MulRow(x, w) => {
                let m = self.dims(x).1;
                let xd = self.value(x).data();
                let wd = self.value(w).data();
                let mut dx = vec![0.0; g.len()];
                let mut dw = vec![0.0; m];
                for (idx, gv) in g.iter().enumerate() {
                    let c = idx % m;
                    dx[idx] = gv * wd[c];
                    dw[c] += gv * xd[idx];
                }
                vec![(x, dx), (w, dw)]
            }
            &Op::Scale(x, c) => vec![(x, g.iter().map(|v| v * c).collect())],
            &Op::Relu(x) => {
                let xd = self.value(x).data();
                vec![(
                    x,
                    g.iter().zip(xd).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                )]
            }
            &Op::Sigmoid(x) => vec![(x, g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect())],
            &Op::SoftmaxRows(x) => {
                let m = out.cols();
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx
                    .chunks_exact_mut(m)
                    .zip(g.chunks_exact(m))
                    .zip(out.data().chunks_exact(m))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![(x, dx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let n = out.rows();
                let gd = self.value(*gain).data();
                let mut dx = vec![0.0; n * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..n {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..d {
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        dxhat[c] = gr[c] * gd[c];
                        sum_dh += dxhat[c];
                        sum_dh_h += dxhat[c] * hr[c];
                    }
                    let scale = inv_std[r] / d as f64;
                    for c in 0..d {
                        dx[r * d + c] = scale * (d as f64 * dxhat[c] - sum_dh - hr[c] * sum_dh_h);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = out.cols();
                let mut dx = vec![0.0; g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &out.data()[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        dx[r * d + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                vec![(*x, dx)]
            }
            &Op::Conv1d { x, kernel, bias } => {
                let (len, cin) = self.dims(x);
                let ks = self.value(kernel).shape();
                let (k, cout) = (ks[0], ks[2]);
                let (dx, dk, db) =
                    conv1d_backward(self.value(x).data(), self.value(kernel).data(), g, len, cin, cout, k);
                vec![(x, dx), (kernel, dk), (bias, db)]
            }
            &Op::SliceCols { x, start } => {
                let m = self.dims(x).1;
                let w = out.cols();
                let mut dx = vec![0.0; self.value(x).numel()];
                for (r, gr) in g.chunks_exact(w.max(1)).enumerate() {
                    dx[r * m + start..r * m + start + w].copy_from_slice(gr);
                }
                vec![(x, dx)]
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.dims(p).1;
                    let mut dp = Vec::with_capacity(self.value(p).numel());
                    for gr in g.chunks_exact(total.max(1)) {
                        dp.extend_from_slice(&gr[offset..offset + w]);
                    }
                    res.push((p, dp));
                    offset += w;
                }
                res
            }
            &Op::SliceRows { x, start } => {
                let m = out.cols();
                let mut dx = vec![0.0; self.value(x).numel()];
                dx[start * m..start * m + g.len()].copy_from_slice(g);
                vec![(x, dx)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.value(p).numel();
                        let dp = g[offset..offset + len].to_vec();
                        offset += len;
                        (p, dp)
                    })
                    .collect()
            }
            &Op::MeanRows(x) => {
                let n = self.dims(x).0;
                let mut dx = Vec::with_capacity(self.value(x).numel());
                for _ in 0..n {
                    dx.extend(g.iter().map(|v| v / n as f64));
                }
                vec![(x, dx)]
            }
            &Op::Sum(x) => vec![(x, vec![g[0]; self.value(x).numel()])],
            Op::Combine(terms) => terms
                .iter()
                .map(|&(v, w)| (v, g.iter().map(|x| x * w).collect()))
                .collect(),
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&ins, out, g);
                inputs.iter().copied().zip(grads).collect()
            }
        }
    }
}

// -------------------------------------------------------------------------
// Kernels
// -------------------------------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)` with max subtraction; `-inf` for an empty row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

/// `a (n×k) · b (k×m)`.
fn gemm_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n×k) · bᵀ` where `b` is `m×k`.
fn gemm_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` where `a` is `inner×rows` and `b` is `inner×cols`.
fn gemm_tn(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for p in 0..inner {
        let brow = &b[p * cols..(p + 1) * cols];
        for i in 0..rows {
            let av = a[p * rows + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * cols..(i + 1) * cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn conv1d_forward(x: &[f64], kernel: &[f64], bias: &[f64], len: usize, cin: usize, cout: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; len * cout];
    for t in 0..len {
        let orow = &mut out[t * cout..(t + 1) * cout];
        orow.copy_from_slice(bias);
        for j in 0..k {
            let src = t + j;
            if src < pad || src - pad >= len {
                continue;
            }
            let xrow = &x[(src - pad) * cin..(src - pad + 1) * cin];
            for (i, &xv) in xrow.iter().enumerate() {
                let krow = &kernel[(j * cin + i) * cout..(j * cin + i + 1) * cout];
                for (o, kv) in orow.iter_mut().zip(krow) {
                    *o += xv * kv;
                }
            }
        }
    }
    out
}

fn conv1d_backward(
    x: &[f64],
    kernel: &[f64],
    g: &[f64],
    len: usize,
    cin: usize,
    cout: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pad = k / 2;
    let mut dx = vec![0.0; len * cin];
    let mut dk = vec![0.0; k * cin * cout];
    let mut db = vec![0.0; cout];
    for t in 0..len {
        let grow = &g[t * cout..(t + 1) * cout];
        for (d, v) in db.iter_mut().zip(grow) {
            *d += v;
        }
        for j in 0..k {
            let src = t + j;
            if src < pad || src - pad >= len {
                continue;
            }
            let s = src - pad;
            for i in 0..cin {
                let base = (j * cin + i) * cout;
                let krow = &kernel[base..base + cout];
                let xv = x[s * cin + i];
                let mut acc = 0.0;
                for o in 0..cout {
                    acc += grow[o] * krow[o];
                    dk[base + o] += grow[o] * xv;
                }
                dx[s * cin + i] += acc;
            }
        }
    }
    (dx, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_identity() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0]]));
        let w = t.constant(Tensor::identity(2));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_example() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 1.0]]));
        let w = t.constant(m(&[&[2.0], &[3.0]]));
        let b = t.constant(Tensor::vector(vec![1.0]));
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_zero_input_gives_bias() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[3, 2]));
        let w = t.constant(m(&[&[0.3, -1.0], &[2.0, 0.5]]));
        let b = t.constant(Tensor::vector(vec![5.0, 5.0]));
        let y = t.linear(x, w, b).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn linear_rejects_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3]));
        let w = t.constant(Tensor::zeros(&[2, 2]));
        let b = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(t.linear(x, w, b), Err(Error::Shape { .. })));
        let w = t.constant(Tensor::zeros(&[3, 2]));
        let b = t.constant(Tensor::zeros(&[4]));
        assert!(matches!(t.linear(x, w, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[0.0, 0.0], &[core::f64::consts::LN_2, 0.0], &[1000.0, 0.0]]));
        let y = t.softmax_lastdim(x).unwrap();
        let v = t.value(y).data();
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-15);
        // e^-1000 underflows to 0 in extended precision as well.
        assert_eq!(v[4], 1.0);
        assert_eq!(v[5], 0.0);
    }

    #[test]
    fn softmax_rejects_empty() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 0]));
        assert!(t.softmax_lastdim(x).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[3.0, 3.0, 3.0], &[1.0, -1.0, 0.0]]));
        let g = t.constant(Tensor::full(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(&t.value(y).data()[0..3], &[0.0, 0.0, 0.0]);

        let x = t.constant(m(&[&[1.0, -1.0]]));
        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let eps = 1e-12;
        let y = t.layer_norm(x, g, b, eps).unwrap();
        let want = 1.0 / libm::sqrt(1.0 + eps);
        assert!((t.value(y).data()[0] - want).abs() < 1e-15);
        assert!((t.value(y).data()[1] + want).abs() < 1e-15);

        let x = t.constant(m(&[&[1.0, 7.0, -2.0]]));
        let g = t.constant(Tensor::zeros(&[3]));
        let b = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = t.l2_normalize_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.6, 0.8]);
        let x = t.constant(Tensor::vector(vec![0.6, 0.8]));
        let y = t.l2_normalize_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.6, 0.8]);
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(t.l2_normalize_rows(x).unwrap_err(), Error::ZeroNorm { row: 0 });
    }

    #[test]
    fn conv_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = t.constant(Tensor::new(vec![3, 1, 1], vec![1.0; 3]).unwrap());
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv1d_same(x, k, b).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 6.0, 9.0, 7.0]);

        let delta = t.constant(Tensor::new(vec![3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap());
        let y = t.conv1d_same(x, delta, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = t.constant(Tensor::zeros(&[4, 1]));
        let y = t.conv1d_same(z, k, b).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));

        let even = t.constant(Tensor::new(vec![2, 1, 1], vec![1.0; 2]).unwrap());
        assert!(matches!(t.conv1d_same(x, even, b), Err(Error::Invalid(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::zeros(&[2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = t.variable(Tensor::vector(vec![3.0, 4.0]));
        let p = t.mul(c, x).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
    }
}
