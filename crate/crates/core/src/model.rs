//! The full network: input projections, visual refinement, cross-modal
//! attention, contrastive heads and the fusion classifier.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::conlearn::{modality_loss, ContrastiveConfig, ProjectionHeadParams};
use crate::data::{Corpus, Dialogue};
use crate::error::{Error, Result};
use crate::head::{self, ClassifierConfig, ClassifierParams};
use crate::ingest::{ingest_raw_features, InputProjection};
use crate::mcn::{mcn_forward, McnConfig, McnParams, ModalState, Modality};
use crate::metrics::{weighted_f1, EvalReport};
use crate::params::ParamStore;
use crate::psa::{psa_forward, temporal_pool, PsaConfig, PsaParams};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Graph switches for ablation runs. Parameters are allocated either way.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Mean-pool the projected frames directly.
    pub no_psa: bool,
    /// Feed projected features straight to the classifier, without the
    /// attention stack or the contrastive loss.
    pub no_mcn_cl: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub text_dim: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub psa: PsaConfig,
    pub mcn: McnConfig,
    pub contrastive: ContrastiveConfig,
    pub classifier: ClassifierConfig,
    /// Weight of the contrastive term in the total loss.
    pub lambda: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 6,
            text_dim: 768,
            audio_dim: 512,
            visual_dim: 1000,
            psa: PsaConfig::default(),
            mcn: McnConfig::default(),
            contrastive: ContrastiveConfig::default(),
            classifier: ClassifierConfig::default(),
            lambda: 1.0,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.psa.validate()?;
        self.mcn.validate()?;
        self.contrastive.validate()?;
        if self.psa.channels != self.mcn.model_dim {
            return Err(Error::invalid(format!(
                "psa channels {} must equal model_dim {}",
                self.psa.channels, self.mcn.model_dim
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite and nonnegative"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        Ok(())
    }

    /// Checks that `corpus` fits this model's label space and raw widths.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.num_classes != self.num_classes {
            return Err(Error::invalid(format!(
                "corpus has {} classes, model expects {}",
                corpus.num_classes, self.num_classes
            )));
        }
        let got = [corpus.text_dim, corpus.audio_dim, corpus.visual_dim];
        let want = [self.text_dim, self.audio_dim, self.visual_dim];
        if got != want {
            return Err(Error::invalid(format!(
                "corpus feature dims {got:?}, model expects {want:?}"
            )));
        }
        Ok(())
    }
}

/// Loss terms of one batch, recorded on a tape.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub ce: Var,
    pub contrast: Option<Var>,
    /// `N×K`.
    pub logits: Var,
    pub labels: Vec<usize>,
}

/// Fused per-utterance features of a batch, each `N×D`.
#[derive(Debug, Clone, Copy)]
pub struct BatchFeatures {
    pub text: Var,
    pub audio: Var,
    pub visual: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub input: InputProjection,
    pub psa: PsaParams,
    pub mcn: McnParams,
    pub projection: ProjectionHeadParams,
    pub classifier: ClassifierParams,
}

impl Model {
    /// Initializes every parameter from one seeded stream, in a fixed order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut store = ParamStore::new();
        let d = config.mcn.model_dim;
        let input = InputProjection::init(
            &mut store,
            [config.text_dim, config.audio_dim, config.visual_dim],
            d,
            "input",
            &mut rng,
        )?;
        let psa = PsaParams::init(&mut store, &config.psa, "psa", &mut rng)?;
        let mcn = McnParams::init(&mut store, &config.mcn, "mcn", &mut rng)?;
        let projection = ProjectionHeadParams::init(&mut store, d, config.contrastive.projection_dim, "proj", &mut rng);
        let classifier = ClassifierParams::init(
            &mut store,
            d,
            &config.classifier,
            config.num_classes,
            "classifier",
            &mut rng,
        )?;
        Ok(Model {
            config,
            store,
            input,
            psa,
            mcn,
            projection,
            classifier,
        })
    }

    fn dialogue_features(&self, tape: &mut Tape, dialogue: &Dialogue) -> Result<ModalState> {
        if dialogue.is_empty() {
            return Err(Error::invalid(format!("dialogue {} has no utterances", dialogue.id)));
        }
        let u = dialogue.len();
        let utts = &dialogue.utterances;
        let text: Vec<f64> = utts.iter().flat_map(|x| x.text.iter().copied()).collect();
        let audio: Vec<f64> = utts.iter().flat_map(|x| x.audio.iter().copied()).collect();
        let text = tape.constant(Tensor::matrix(u, self.config.text_dim, text)?);
        let audio = tape.constant(Tensor::matrix(u, self.config.audio_dim, audio)?);
        let clips: Vec<Var> = utts.iter().map(|x| tape.constant(x.visual.clone())).collect();
        let p = ingest_raw_features(tape, text, audio, &clips, &self.input)?;

        let mut pooled = Vec::with_capacity(u);
        for clip in p.visual {
            let frames = if self.config.ablation.no_psa {
                clip
            } else {
                psa_forward(tape, clip, &self.psa)?
            };
            pooled.push(temporal_pool(tape, frames, self.config.psa.pooling)?);
        }
        let visual = tape.concat_rows(&pooled)?;
        let state = ModalState {
            text: p.text,
            audio: p.audio,
            visual,
        };
        if self.config.ablation.no_mcn_cl {
            Ok(state)
        } else {
            mcn_forward(tape, state, &self.mcn)
        }
    }

    /// Per-utterance features for all dialogues, stacked in order.
    pub fn features(&self, tape: &mut Tape, dialogues: &[&Dialogue]) -> Result<BatchFeatures> {
        let mut parts: [Vec<Var>; 3] = Default::default();
        for d in dialogues {
            let s = self.dialogue_features(tape, d)?;
            for m in Modality::ALL {
                parts[m.index()].push(s.get(m));
            }
        }
        Ok(BatchFeatures {
            text: tape.concat_rows(&parts[0])?,
            audio: tape.concat_rows(&parts[1])?,
            visual: tape.concat_rows(&parts[2])?,
        })
    }

    pub fn logits(&self, tape: &mut Tape, dialogues: &[&Dialogue]) -> Result<Var> {
        let f = self.features(tape, dialogues)?;
        head::logits(tape, f.text, f.audio, f.visual, &self.classifier)
    }

    /// Records cross-entropy plus `λ`-weighted contrastive loss for a batch.
    pub fn batch_loss(&self, tape: &mut Tape, dialogues: &[&Dialogue]) -> Result<BatchLoss> {
        let labels: Vec<usize> = dialogues.iter().flat_map(|d| d.labels()).collect();
        if let Some(&y) = labels.iter().find(|&&y| y >= self.config.num_classes) {
            return Err(Error::Label {
                label: y,
                num_classes: self.config.num_classes,
            });
        }
        let f = self.features(tape, dialogues)?;
        let logits = head::logits(tape, f.text, f.audio, f.visual, &self.classifier)?;
        let ce = head::cross_entropy_on_tape(tape, logits, &labels)?;
        let cfg = &self.config;
        let contrast = if cfg.ablation.no_mcn_cl || cfg.lambda == 0.0 {
            None
        } else {
            let mut terms = Vec::with_capacity(3);
            for (m, x) in [
                (Modality::Text, f.text),
                (Modality::Audio, f.audio),
                (Modality::Visual, f.visual),
            ] {
                let l = modality_loss(tape, x, self.projection.head(m), &labels, &cfg.contrastive)?;
                terms.push((l, cfg.contrastive.weight(m)));
            }
            Some(tape.combine(&terms)?)
        };
        let total = head::total_loss_on_tape(tape, ce, contrast, cfg.lambda)?;
        Ok(BatchLoss {
            total,
            ce,
            contrast,
            logits,
            labels,
        })
    }

    /// Predicted class per utterance, in corpus order.
    pub fn predict(&self, corpus: &Corpus) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(corpus.num_utterances());
        for d in &corpus.dialogues {
            let mut tape = Tape::with_params(&self.store);
            let l = self.logits(&mut tape, &[d])?;
            out.extend(head::predictions(tape.value(l)));
        }
        Ok(out)
    }

    pub fn evaluate(&self, corpus: &Corpus) -> Result<EvalReport> {
        self.config.check_corpus(corpus)?;
        let preds = self.predict(corpus)?;
        weighted_f1(&preds, &corpus.labels(), self.config.num_classes)
    }
}
