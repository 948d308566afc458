//! Learned affine projections from raw extractor features to model width.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct InputProjection {
    pub text_dim: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub model_dim: usize,
    pub text_w: ParamId,
    pub text_b: ParamId,
    pub audio_w: ParamId,
    pub audio_b: ParamId,
    /// Applied per frame, before the visual module.
    pub visual_w: ParamId,
    pub visual_b: ParamId,
}

impl InputProjection {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        dims: [usize; 3],
        model_dim: usize,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let [t, a, v] = dims;
        if dims.contains(&0) || model_dim == 0 {
            return Err(Error::invalid("projection dims must be positive"));
        }
        let d = model_dim;
        Ok(InputProjection {
            text_dim: t,
            audio_dim: a,
            visual_dim: v,
            model_dim: d,
            text_w: store.add_uniform(format!("{prefix}.text.weight"), &[t, d], t, rng),
            text_b: store.add_uniform(format!("{prefix}.text.bias"), &[d], t, rng),
            audio_w: store.add_uniform(format!("{prefix}.audio.weight"), &[a, d], a, rng),
            audio_b: store.add_uniform(format!("{prefix}.audio.bias"), &[d], a, rng),
            visual_w: store.add_uniform(format!("{prefix}.visual.weight"), &[v, d], v, rng),
            visual_b: store.add_uniform(format!("{prefix}.visual.bias"), &[d], v, rng),
        })
    }
}

/// Projected inputs of one conversation.
#[derive(Debug, Clone)]
pub struct ProjectedInputs {
    /// `n×D`.
    pub text: Var,
    /// `n×D`.
    pub audio: Var,
    /// Per utterance, `L_i×D` frames.
    pub visual: Vec<Var>,
}

fn expect_cols(tape: &Tape, x: Var, cols: usize, what: &str) -> Result<()> {
    let got = tape.value(x).cols();
    if got != cols {
        return Err(Error::shape(
            "ingest",
            format!("{what} has width {got}, expected {cols}"),
        ));
    }
    Ok(())
}

/// Maps `text: n×d_t`, `audio: n×d_a` and `n` visual clips `L_i×d_v` to width `D`.
pub fn ingest_raw_features(
    tape: &mut Tape,
    text: Var,
    audio: Var,
    visual: &[Var],
    proj: &InputProjection,
) -> Result<ProjectedInputs> {
    expect_cols(tape, text, proj.text_dim, "text")?;
    expect_cols(tape, audio, proj.audio_dim, "audio")?;
    let n = tape.value(text).rows();
    if tape.value(audio).rows() != n || visual.len() != n {
        return Err(Error::shape(
            "ingest",
            format!(
                "{} text rows, {} audio rows, {} visual clips",
                n,
                tape.value(audio).rows(),
                visual.len()
            ),
        ));
    }
    let (w, b) = (tape.param(proj.text_w), tape.param(proj.text_b));
    let text = tape.linear(text, w, b)?;
    let (w, b) = (tape.param(proj.audio_w), tape.param(proj.audio_b));
    let audio = tape.linear(audio, w, b)?;

    // Project all frames of the conversation in one product, then split per clip.
    let mut lengths = Vec::with_capacity(n);
    for &clip in visual {
        expect_cols(tape, clip, proj.visual_dim, "visual clip")?;
        let l = tape.value(clip).rows();
        if l == 0 {
            return Err(Error::invalid("visual clip has no frames"));
        }
        lengths.push(l);
    }
    let frames = tape.concat_rows(visual)?;
    let (w, b) = (tape.param(proj.visual_w), tape.param(proj.visual_b));
    let frames = tape.linear(frames, w, b)?;
    let mut clips = Vec::with_capacity(n);
    let mut start = 0;
    for l in lengths {
        clips.push(tape.slice_rows(frames, start, l)?);
        start += l;
    }
    Ok(ProjectedInputs {
        text,
        audio,
        visual: clips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    fn random(rows: usize, cols: usize, r: &mut rng::Rng) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| r.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_pass_through() {
        let mut store = ParamStore::new();
        let p = InputProjection::init(&mut store, [256, 256, 256], 256, "in", &mut rng::seeded(0)).unwrap();
        for id in [p.text_w, p.audio_w, p.visual_w] {
            *store.get_mut(id) = Tensor::identity(256);
        }
        for id in [p.text_b, p.audio_b, p.visual_b] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut r = rng::seeded(1);
        let (xt, xa) = (random(3, 256, &mut r), random(3, 256, &mut r));
        let clips: Vec<Tensor> = (0..3).map(|i| random(2 + i, 256, &mut r)).collect();
        let mut t = Tape::with_params(&store);
        let (vt, va) = (t.constant(xt.clone()), t.constant(xa.clone()));
        let vv: Vec<Var> = clips.iter().map(|c| t.constant(c.clone())).collect();
        let out = ingest_raw_features(&mut t, vt, va, &vv, &p).unwrap();
        assert_eq!(t.value(out.text), &xt);
        assert_eq!(t.value(out.audio), &xa);
        for (v, c) in out.visual.iter().zip(&clips) {
            assert_eq!(t.value(*v), c);
        }
    }

    #[test]
    fn text_width_contract() {
        let mut store = ParamStore::new();
        let p = InputProjection::init(&mut store, [768, 512, 1000], 256, "in", &mut rng::seeded(0)).unwrap();
        let mut r = rng::seeded(2);
        let mut t = Tape::with_params(&store);
        let vt = t.constant(random(4, 768, &mut r));
        let va = t.constant(random(4, 512, &mut r));
        let vv: Vec<Var> = (0..4).map(|_| t.constant(random(5, 1000, &mut r))).collect();
        let out = ingest_raw_features(&mut t, vt, va, &vv, &p).unwrap();
        assert_eq!(t.value(out.text).shape(), &[4, 256]);
        assert_eq!(t.value(out.audio).shape(), &[4, 256]);
        assert_eq!(t.value(out.visual[3]).shape(), &[5, 256]);

        let bad = t.constant(random(4, 700, &mut r));
        assert!(matches!(
            ingest_raw_features(&mut t, bad, va, &vv, &p),
            Err(Error::Shape { .. })
        ));
        assert!(ingest_raw_features(&mut t, vt, va, &vv[..3], &p).is_err());
    }

    #[test]
    fn matches_affine_oracle() {
        let mut store = ParamStore::new();
        let p = InputProjection::init(&mut store, [7, 5, 6], 4, "in", &mut rng::seeded(3)).unwrap();
        let mut r = rng::seeded(4);
        for id in [p.text_b, p.audio_b, p.visual_b] {
            let n = store.get(id).numel();
            *store.get_mut(id) = Tensor::vector((0..n).map(|_| r.random_range(-1.0..1.0)).collect());
        }
        let xt = random(3, 7, &mut r);
        let xa = random(3, 5, &mut r);
        let clips: Vec<Tensor> = (0..3).map(|i| random(1 + 2 * i, 6, &mut r)).collect();
        let mut t = Tape::with_params(&store);
        let (vt, va) = (t.constant(xt.clone()), t.constant(xa.clone()));
        let vv: Vec<Var> = clips.iter().map(|c| t.constant(c.clone())).collect();
        let out = ingest_raw_features(&mut t, vt, va, &vv, &p).unwrap();

        let affine = |x: &Tensor, w: &Tensor, b: &Tensor| -> Vec<f64> {
            let mut y = Vec::new();
            for i in 0..x.rows() {
                for j in 0..w.cols() {
                    let mut s = b.data()[j];
                    for k in 0..x.cols() {
                        s += x.get(i, k) * w.get(k, j);
                    }
                    y.push(s);
                }
            }
            y
        };
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(
            t.value(out.text).data(),
            &affine(&xt, store.get(p.text_w), store.get(p.text_b))
        ));
        assert!(close(
            t.value(out.audio).data(),
            &affine(&xa, store.get(p.audio_w), store.get(p.audio_b))
        ));
        for (v, c) in out.visual.iter().zip(&clips) {
            assert!(close(
                t.value(*v).data(),
                &affine(c, store.get(p.visual_w), store.get(p.visual_b))
            ));
        }
    }
}
