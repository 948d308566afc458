//! Conversation data model and the seeded synthetic corpus generator.
//!
//! Every utterance carries a text vector, an audio vector and a clip of
//! visual frames. The generator draws a latent emotion vector per utterance
//! around a class mean, then renders each modality through its own fixed
//! random mixing matrix plus independent noise, so no single modality sees
//! the latent cleanly and fusing them helps.
//!
//! In [`Signal::Dynamics`] mode the class is invisible to every static
//! feature: text, audio and the per-frame visual baseline are class-free,
//! and the label only shows up as a zero-mean linear drift across the visual
//! frames. Averaging frames erases it exactly; a temporal filter recovers it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: u32,
    pub label: usize,
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
    /// `L×d_v` frames.
    pub visual: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub id: u64,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.utterances.iter().map(|u| u.label)
    }
}

/// A set of dialogues sharing one label space and feature geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub num_classes: usize,
    pub text_dim: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn num_utterances(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.dialogues.iter().flat_map(Dialogue::labels).collect()
    }

    pub fn class_histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.num_classes];
        for y in self.dialogues.iter().flat_map(Dialogue::labels) {
            if y < self.num_classes {
                h[y] += 1;
            }
        }
        h
    }

    /// Checks dialogue, label, dimension and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("corpus needs at least two classes"));
        }
        for d in &self.dialogues {
            if d.is_empty() {
                return Err(Error::invalid(format!("dialogue {} has no utterances", d.id)));
            }
            for (i, u) in d.utterances.iter().enumerate() {
                let at = || format!("dialogue {} utterance {}", d.id, i);
                if u.label >= self.num_classes {
                    return Err(Error::Label {
                        label: u.label,
                        num_classes: self.num_classes,
                    });
                }
                if u.text.len() != self.text_dim || u.audio.len() != self.audio_dim {
                    return Err(Error::shape("corpus", format!("{}: feature width mismatch", at())));
                }
                if u.visual.shape().len() != 2 || u.visual.cols() != self.visual_dim || u.visual.rows() == 0 {
                    return Err(Error::shape(
                        "corpus",
                        format!("{}: visual clip shape {:?}", at(), u.visual.shape()),
                    ));
                }
                let finite = u.text.iter().chain(&u.audio).all(|v| v.is_finite()) && u.visual.is_finite();
                if !finite {
                    return Err(Error::NonFinite { what: at() });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityNoise {
    pub text: f64,
    pub audio: f64,
    pub visual: f64,
}

/// Where the class signal lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    /// Class-conditional latent rendered into every modality.
    #[default]
    Static,
    /// Class shows only as a zero-mean drift across visual frames.
    Dynamics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    /// Dialogue count per split.
    pub dialogues: SplitSizes,
    /// Inclusive range of utterances per dialogue.
    pub utterances: [usize; 2],
    /// Inclusive range of visual frames per utterance.
    pub frames: [usize; 2],
    pub num_classes: usize,
    /// Class probabilities; empty means uniform.
    pub class_prior: Vec<f64>,
    /// Norm of each class mean in latent space.
    pub separation: f64,
    pub latent_dim: usize,
    /// Spread of the latent around its class mean.
    pub latent_noise: f64,
    pub noise: ModalityNoise,
    pub text_dim: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub num_speakers: u32,
    /// Probability that an utterance repeats its dialogue's dominant emotion
    /// instead of drawing a fresh label from the prior.
    pub persistence: f64,
    pub signal: Signal,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            dialogues: SplitSizes {
                train: 50,
                val: 10,
                test: 10,
            },
            utterances: [6, 14],
            frames: [4, 12],
            num_classes: 6,
            class_prior: Vec::new(),
            separation: 4.0,
            latent_dim: 16,
            latent_noise: 1.0,
            noise: ModalityNoise {
                text: 1.0,
                audio: 1.0,
                visual: 1.0,
            },
            text_dim: 768,
            audio_dim: 512,
            visual_dim: 1000,
            num_speakers: 2,
            persistence: 0.0,
            signal: Signal::Static,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    /// The prior actually used: the configured one, or uniform when empty.
    pub fn prior(&self) -> Vec<f64> {
        if self.class_prior.is_empty() {
            vec![1.0 / self.num_classes as f64; self.num_classes]
        } else {
            self.class_prior.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let prior = self.prior();
        if prior.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "class_prior has {} entries for {} classes",
                prior.len(),
                self.num_classes
            )));
        }
        if let Some(c) = prior.iter().position(|p| !(*p > 0.0)) {
            return Err(Error::invalid(format!(
                "degenerate class prior: class {c} has probability {} but belongs to the label space",
                prior[c]
            )));
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("class_prior sums to {total}, not 1")));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::invalid("separation must be finite and nonnegative"));
        }
        let noise = [self.latent_noise, self.noise.text, self.noise.audio, self.noise.visual];
        if noise.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::invalid("noise levels must be finite and nonnegative"));
        }
        for (what, [lo, hi]) in [("utterances", self.utterances), ("frames", self.frames)] {
            if lo == 0 || lo > hi {
                return Err(Error::invalid(format!(
                    "{what} range [{lo}, {hi}] is empty or starts at 0"
                )));
            }
        }
        if [self.latent_dim, self.text_dim, self.audio_dim, self.visual_dim].contains(&0) {
            return Err(Error::invalid("dimensions must be positive"));
        }
        if self.num_speakers == 0 {
            return Err(Error::invalid("need at least one speaker"));
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            return Err(Error::invalid("persistence must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `rows×cols` Gaussian matrix with entries of variance `1/cols`.
fn mixing<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let s = 1.0 / libm::sqrt(cols as f64);
    (0..rows * cols).map(|_| s * normal(rng)).collect()
}

fn categorical<R: Rng>(prior: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    prior.len() - 1
}

struct Geometry {
    means: Vec<Vec<f64>>,
    text: Vec<f64>,
    audio: Vec<f64>,
    visual: Vec<f64>,
}

/// `y = M h + σ ε` for a row-major `rows×h.len()` matrix.
fn render<R: Rng>(m: &[f64], h: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    m.chunks_exact(h.len())
        .map(|row| row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + sigma * normal(rng))
        .collect()
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    prior: Vec<f64>,
    geo: Geometry,
    rng: rng::Rng,
}

impl Generator<'_> {
    fn utterance(&mut self, speaker: u32, label: usize) -> Result<Utterance> {
        let spec = self.spec;
        let q = spec.latent_dim;
        let latent: Vec<f64> = match spec.signal {
            Signal::Static => self.geo.means[label]
                .iter()
                .map(|m| m + spec.latent_noise * normal(&mut self.rng))
                .collect(),
            Signal::Dynamics => (0..q).map(|_| spec.latent_noise * normal(&mut self.rng)).collect(),
        };
        let text = render(&self.geo.text, &latent, spec.noise.text, &mut self.rng);
        let audio = render(&self.geo.audio, &latent, spec.noise.audio, &mut self.rng);
        let frames = self.rng.random_range(spec.frames[0]..=spec.frames[1]);
        let center = (frames as f64 - 1.0) / 2.0;
        let mut visual = Vec::with_capacity(frames * spec.visual_dim);
        for t in 0..frames {
            let h: Vec<f64> = match spec.signal {
                Signal::Static => latent.clone(),
                Signal::Dynamics => {
                    let drift = t as f64 - center;
                    latent
                        .iter()
                        .zip(&self.geo.means[label])
                        .map(|(l, m)| l + drift * m)
                        .collect()
                }
            };
            visual.extend(render(&self.geo.visual, &h, spec.noise.visual, &mut self.rng));
        }
        Ok(Utterance {
            speaker,
            label,
            text,
            audio,
            visual: Tensor::matrix(frames, spec.visual_dim, visual)?,
        })
    }

    fn dialogue(&mut self, id: u64) -> Result<Dialogue> {
        let spec = self.spec;
        let n = self.rng.random_range(spec.utterances[0]..=spec.utterances[1]);
        let dominant = categorical(&self.prior, &mut self.rng);
        let mut utterances = Vec::with_capacity(n);
        for i in 0..n {
            let keep = self.rng.random::<f64>() < spec.persistence;
            let label = if keep {
                dominant
            } else {
                categorical(&self.prior, &mut self.rng)
            };
            utterances.push(self.utterance(i as u32 % spec.num_speakers, label)?);
        }
        Ok(Dialogue { id, utterances })
    }

    fn corpus(&mut self, first_id: u64, count: usize) -> Result<Corpus> {
        let dialogues = (0..count as u64)
            .map(|i| self.dialogue(first_id + i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            num_classes: self.spec.num_classes,
            text_dim: self.spec.text_dim,
            audio_dim: self.spec.audio_dim,
            visual_dim: self.spec.visual_dim,
            dialogues,
        })
    }
}

/// Draws train/val/test corpora from `spec`. Dialogue ids run consecutively
/// across the three splits, so no id is shared.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<CorpusSplits> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let q = spec.latent_dim;
    let means = (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..q).map(|_| normal(&mut rng)).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            v.iter().map(|x| spec.separation * x / norm).collect()
        })
        .collect();
    let geo = Geometry {
        means,
        text: mixing(spec.text_dim, q, &mut rng),
        audio: mixing(spec.audio_dim, q, &mut rng),
        visual: mixing(spec.visual_dim, q, &mut rng),
    };
    let mut g = Generator {
        spec,
        prior: spec.prior(),
        geo,
        rng,
    };
    let sizes = spec.dialogues;
    let train = g.corpus(0, sizes.train)?;
    let val = g.corpus(sizes.train as u64, sizes.val)?;
    let test = g.corpus((sizes.train + sizes.val) as u64, sizes.test)?;
    Ok(CorpusSplits { train, val, test })
}
