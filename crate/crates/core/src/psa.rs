//! Temporal pyramid squeeze attention for per-frame visual features.
//!
//! Channels are split into `S` groups; group `s` is convolved over time with
//! a kernel of size `2(s+1)+1` (3, 5, 7, 9 for four groups), the group
//! outputs are concatenated, and a squeeze-excitation gate computed from the
//! time-averaged features rescales every channel. The refined frames are then
//! pooled into one vector per utterance.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Frame-to-utterance reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsaConfig {
    pub num_branches: usize,
    pub channels: usize,
    /// Bottleneck divisor of the excitation MLP (`C → C / se_reduction → C`).
    pub se_reduction: usize,
    pub pooling: Pooling,
}

impl Default for PsaConfig {
    fn default() -> Self {
        PsaConfig {
            num_branches: 4,
            channels: 256,
            se_reduction: 4,
            pooling: Pooling::Mean,
        }
    }
}

impl PsaConfig {
    pub fn kernel_size(branch: usize) -> usize {
        2 * (branch + 1) + 1
    }

    pub fn group_width(&self) -> usize {
        self.channels / self.num_branches
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_branches == 0 || self.channels == 0 {
            return Err(Error::invalid("psa needs at least one branch and channel"));
        }
        if !self.channels.is_multiple_of(self.num_branches) {
            return Err(Error::invalid(format!(
                "psa channels {} not divisible by {} branches",
                self.channels, self.num_branches
            )));
        }
        if self.se_reduction == 0 || !self.channels.is_multiple_of(self.se_reduction) {
            return Err(Error::invalid(format!(
                "psa channels {} not divisible by se_reduction {}",
                self.channels, self.se_reduction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsaParams {
    pub config: PsaConfig,
    /// Per branch: kernel `[k_s, C/S, C/S]`.
    pub kernels: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub se_fc1_w: ParamId,
    pub se_fc1_b: ParamId,
    pub se_fc2_w: ParamId,
    pub se_fc2_b: ParamId,
}

impl PsaParams {
    pub fn init<R: Rng>(store: &mut ParamStore, config: &PsaConfig, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.group_width();
        let c = config.channels;
        let hidden = c / config.se_reduction;
        let mut kernels = Vec::with_capacity(config.num_branches);
        let mut biases = Vec::with_capacity(config.num_branches);
        for s in 0..config.num_branches {
            let k = PsaConfig::kernel_size(s);
            kernels.push(store.add_uniform(format!("{prefix}.branch{s}.kernel"), &[k, w, w], k * w, rng));
            biases.push(store.add_uniform(format!("{prefix}.branch{s}.bias"), &[w], k * w, rng));
        }
        Ok(PsaParams {
            config: config.clone(),
            kernels,
            biases,
            se_fc1_w: store.add_uniform(format!("{prefix}.se.fc1.weight"), &[c, hidden], c, rng),
            se_fc1_b: store.add_uniform(format!("{prefix}.se.fc1.bias"), &[hidden], c, rng),
            se_fc2_w: store.add_uniform(format!("{prefix}.se.fc2.weight"), &[hidden, c], hidden, rng),
            se_fc2_b: store.add_uniform(format!("{prefix}.se.fc2.bias"), &[c], hidden, rng),
        })
    }
}

fn check_input(tape: &Tape, x: Var, params: &PsaParams) -> Result<()> {
    let v = tape.value(x);
    if v.cols() != params.config.channels {
        return Err(Error::shape(
            "psa",
            format!("{} channels, configured for {}", v.cols(), params.config.channels),
        ));
    }
    if v.rows() == 0 {
        return Err(Error::invalid("psa input has no frames"));
    }
    Ok(())
}

/// Grouped multi-scale convolution: `L×C → L×C`.
pub fn multi_scale_conv(tape: &mut Tape, x: Var, params: &PsaParams) -> Result<Var> {
    check_input(tape, x, params)?;
    let kernels: Vec<Var> = params.kernels.iter().map(|&k| tape.param(k)).collect();
    let biases: Vec<Var> = params.biases.iter().map(|&b| tape.param(b)).collect();
    tape.conv1d_grouped(x, &kernels, &biases)
}

/// Channel gate `sigmoid(FC₂(ReLU(FC₁(GAP(y)))))`, shape `1×C`.
pub fn se_weight(tape: &mut Tape, y: Var, params: &PsaParams) -> Result<Var> {
    let z = tape.mean_rows(y)?;
    let (w1, b1) = (tape.param(params.se_fc1_w), tape.param(params.se_fc1_b));
    let (w2, b2) = (tape.param(params.se_fc2_w), tape.param(params.se_fc2_b));
    let h = tape.linear(z, w1, b1)?;
    let h = tape.relu(h);
    let s = tape.linear(h, w2, b2)?;
    Ok(tape.sigmoid(s))
}

/// Full module: multi-scale convolution reweighted per channel, `L×C → L×C`.
pub fn psa_forward(tape: &mut Tape, x: Var, params: &PsaParams) -> Result<Var> {
    let y = multi_scale_conv(tape, x, params)?;
    let w = se_weight(tape, y, params)?;
    tape.mul_row(y, w)
}

/// Reduces `L×C` frames to a `1×C` utterance vector.
pub fn temporal_pool(tape: &mut Tape, frames: Var, pooling: Pooling) -> Result<Var> {
    match pooling {
        Pooling::Mean => tape.mean_rows(frames),
    }
}
