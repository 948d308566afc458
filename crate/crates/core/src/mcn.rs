//! Stacked triple-query cross-attention fusion.
//!
//! Every layer runs one query stream per modality. A stream attends first to
//! one partner modality and then, using that result as queries, to the other
//! (text: audio then visual; audio: text then visual; visual: text then
//! audio). Each attention stage is post-norm: `LN(q + MH(q, kv))` followed by
//! `LN(h + FFN(h))`. The attention axis is the utterance sequence of one
//! conversation, without masking or positional terms.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
            Modality::Visual => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

/// Partner modalities, in attention order, for each query stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamOrder {
    pub text: [Modality; 2],
    pub audio: [Modality; 2],
    pub visual: [Modality; 2],
}

impl Default for StreamOrder {
    fn default() -> Self {
        StreamOrder {
            text: [Modality::Audio, Modality::Visual],
            audio: [Modality::Text, Modality::Visual],
            visual: [Modality::Text, Modality::Audio],
        }
    }
}

impl StreamOrder {
    pub fn partners(&self, m: Modality) -> [Modality; 2] {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McnConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub layer_norm_eps: f64,
    pub stream_order: StreamOrder,
}

impl Default for McnConfig {
    fn default() -> Self {
        McnConfig {
            model_dim: 256,
            num_heads: 4,
            num_layers: 2,
            ffn_dim: 1024,
            layer_norm_eps: 1e-5,
            stream_order: StreamOrder::default(),
        }
    }
}

impl McnConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::invalid("ffn_dim must be positive"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::invalid("layer_norm_eps must be positive"));
        }
        for m in Modality::ALL {
            let [a, b] = self.stream_order.partners(m);
            if a == m || b == m || a == b {
                return Err(Error::invalid(format!(
                    "{} stream must attend to the two other modalities, got {:?}",
                    m.name(),
                    [a, b]
                )));
            }
        }
        Ok(())
    }
}

/// One cross-attention stage: projections, Add & Norm, feed-forward, Add & Norm.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    /// `D×D`; head `h` uses columns `h·d_k .. (h+1)·d_k`.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

impl StageParams {
    fn init<R: Rng>(store: &mut ParamStore, cfg: &McnConfig, prefix: &str, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        StageParams {
            wq: store.add_uniform(format!("{prefix}.wq"), &[d, d], d, rng),
            wk: store.add_uniform(format!("{prefix}.wk"), &[d, d], d, rng),
            wv: store.add_uniform(format!("{prefix}.wv"), &[d, d], d, rng),
            wo: store.add_uniform(format!("{prefix}.wo"), &[d, d], d, rng),
            norm1_gain: store.add_ones(format!("{prefix}.norm1.gain"), &[d]),
            norm1_bias: store.add_zeros(format!("{prefix}.norm1.bias"), &[d]),
            ffn_w1: store.add_uniform(format!("{prefix}.ffn.w1"), &[d, f], d, rng),
            ffn_b1: store.add_uniform(format!("{prefix}.ffn.b1"), &[f], d, rng),
            ffn_w2: store.add_uniform(format!("{prefix}.ffn.w2"), &[f, d], f, rng),
            ffn_b2: store.add_uniform(format!("{prefix}.ffn.b2"), &[d], f, rng),
            norm2_gain: store.add_ones(format!("{prefix}.norm2.gain"), &[d]),
            norm2_bias: store.add_zeros(format!("{prefix}.norm2.bias"), &[d]),
        }
    }

    pub fn ids(&self) -> [ParamId; 12] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.norm1_gain,
            self.norm1_bias,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.norm2_gain,
            self.norm2_bias,
        ]
    }
}

/// Parameters of one layer, indexed `[stream][stage]` with streams in
/// [`Modality::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub streams: [[StageParams; 2]; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct McnParams {
    pub config: McnConfig,
    pub layers: Vec<LayerParams>,
}

impl McnParams {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &McnConfig, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for j in 0..cfg.num_layers {
            let mut stage = |m: Modality, g: usize, rng: &mut R| {
                let partner = cfg.stream_order.partners(m)[g];
                StageParams::init(
                    store,
                    cfg,
                    &format!("{prefix}.layer{j}.{}.{}", m.name(), partner.name()),
                    rng,
                )
            };
            let streams = [
                [stage(Modality::Text, 0, rng), stage(Modality::Text, 1, rng)],
                [stage(Modality::Audio, 0, rng), stage(Modality::Audio, 1, rng)],
                [stage(Modality::Visual, 0, rng), stage(Modality::Visual, 1, rng)],
            ];
            layers.push(LayerParams { streams });
        }
        Ok(McnParams {
            config: cfg.clone(),
            layers,
        })
    }
}

/// Per-modality utterance sequences of one conversation, each `U×D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalState {
    pub text: Var,
    pub audio: Var,
    pub visual: Var,
}

impl ModalState {
    pub fn get(&self, m: Modality) -> Var {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }

    fn from_array(v: [Var; 3]) -> Self {
        ModalState {
            text: v[0],
            audio: v[1],
            visual: v[2],
        }
    }
}

/// Intermediate values of one attention stage, for inspection.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub output: Var,
    /// Per head, the `U_q×U_kv` row-stochastic attention matrix.
    pub weights: Vec<Var>,
    /// Concatenated head outputs before the output projection.
    pub heads: Var,
}

/// `LN(h + FFN(h))` with `h = LN(q + Concat_h(softmax(Q_h K_hᵀ/√d_k) V_h) W^O)`.
pub fn cross_attention_block(
    tape: &mut Tape,
    query: Var,
    kv: Var,
    stage: &StageParams,
    cfg: &McnConfig,
) -> Result<Var> {
    Ok(cross_attention_traced(tape, query, kv, stage, cfg)?.output)
}

pub fn cross_attention_traced(
    tape: &mut Tape,
    query: Var,
    kv: Var,
    stage: &StageParams,
    cfg: &McnConfig,
) -> Result<AttentionTrace> {
    cfg.validate()?;
    let d = cfg.model_dim;
    for (what, v) in [("query", query), ("key/value", kv)] {
        if tape.value(v).cols() != d {
            return Err(Error::shape(
                "cross_attention",
                format!("{what} width {} != model_dim {d}", tape.value(v).cols()),
            ));
        }
    }
    let dk = cfg.head_dim();
    let wq = tape.param(stage.wq);
    let wk = tape.param(stage.wk);
    let wv = tape.param(stage.wv);
    let q = tape.matmul(query, wq)?;
    let k = tape.matmul(kv, wk)?;
    let v = tape.matmul(kv, wv)?;
    let scale = 1.0 / libm::sqrt(dk as f64);
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (qh, kh, vh) = if cfg.num_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dk, dk)?,
                tape.slice_cols(k, h * dk, dk)?,
                tape.slice_cols(v, h * dk, dk)?,
            )
        };
        let logits = tape.matmul_t(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax_lastdim(logits)?;
        heads.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let wo = tape.param(stage.wo);
    let mh = tape.matmul(concat, wo)?;
    let res = tape.add(query, mh)?;
    let (g1, b1) = (tape.param(stage.norm1_gain), tape.param(stage.norm1_bias));
    let h = tape.layer_norm(res, g1, b1, cfg.layer_norm_eps)?;
    let (w1, fb1) = (tape.param(stage.ffn_w1), tape.param(stage.ffn_b1));
    let (w2, fb2) = (tape.param(stage.ffn_w2), tape.param(stage.ffn_b2));
    let f = tape.linear(h, w1, fb1)?;
    let f = tape.relu(f);
    let f = tape.linear(f, w2, fb2)?;
    let res = tape.add(h, f)?;
    let (g2, b2) = (tape.param(stage.norm2_gain), tape.param(stage.norm2_bias));
    let output = tape.layer_norm(res, g2, b2, cfg.layer_norm_eps)?;
    Ok(AttentionTrace {
        output,
        weights,
        heads: concat,
    })
}

/// One fusion layer: every stream attends to its two partners in order.
/// Partners are read from the layer input, so stream order does not matter.
pub fn mcn_layer(tape: &mut Tape, state: ModalState, layer: &LayerParams, cfg: &McnConfig) -> Result<ModalState> {
    let u = tape.value(state.text).rows();
    for m in Modality::ALL {
        let v = tape.value(state.get(m));
        if v.rows() != u || v.cols() != cfg.model_dim {
            return Err(Error::shape(
                "mcn_layer",
                format!(
                    "{} stream is {}x{}, expected {}x{}",
                    m.name(),
                    v.rows(),
                    v.cols(),
                    u,
                    cfg.model_dim
                ),
            ));
        }
    }
    let mut out = [state.text; 3];
    for m in Modality::ALL {
        let [first, second] = cfg.stream_order.partners(m);
        let stages = &layer.streams[m.index()];
        let fused = cross_attention_block(tape, state.get(m), state.get(first), &stages[0], cfg)?;
        out[m.index()] = cross_attention_block(tape, fused, state.get(second), &stages[1], cfg)?;
    }
    Ok(ModalState::from_array(out))
}

/// Applies all configured layers in sequence; zero layers is the identity.
pub fn mcn_forward(tape: &mut Tape, state: ModalState, params: &McnParams) -> Result<ModalState> {
    params
        .layers
        .iter()
        .try_fold(state, |s, layer| mcn_layer(tape, s, layer, &params.config))
}
