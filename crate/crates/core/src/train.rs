//! Mini-batch training with per-epoch validation.
//!
//! A batch is a run of whole dialogues, taken in a shuffled order, closed as
//! soon as it holds at least `batch_size` utterances. Attention runs inside
//! each dialogue; the contrastive loss sees every utterance of the batch.
//! The shuffle for epoch `e` comes from [`rng::derived`]`(seed, e)`, so the
//! run is fully determined by the seed.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Dialogue};
use crate::error::{Divergence, Error, Result};
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minimum utterances per batch.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Utterance-weighted mean of the batch losses seen during the epoch.
    pub train_loss: f64,
    pub val_weighted_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Result of one epoch; `improved` marks a new best validation score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochOutcome {
    pub record: EpochRecord,
    pub improved: bool,
}

impl Trainer {
    pub fn new(model: Model, optimizer: OptimizerConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let optimizer = Optimizer::new(optimizer, &model.store)?;
        Ok(Trainer {
            model,
            optimizer,
            config,
            seed,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Best validation score so far with its epoch; earliest wins ties.
    pub fn best(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for r in &self.history {
            if let Some(f) = r.val_weighted_f1 {
                if best.is_none_or(|(_, b)| f > b) {
                    best = Some((r.epoch, f));
                }
            }
        }
        best
    }

    /// Dialogue indices of each batch of 0-based epoch `epoch`.
    pub fn batches(&self, corpus: &Corpus, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..corpus.dialogues.len()).collect();
        order.shuffle(&mut rng::derived(self.seed, epoch as u64 + 1));
        let mut out = Vec::new();
        let mut cur = Vec::new();
        let mut count = 0;
        for i in order {
            cur.push(i);
            count += corpus.dialogues[i].len();
            if count >= self.config.batch_size {
                out.push(core::mem::take(&mut cur));
                count = 0;
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    fn evaluate_batch(&self, dialogues: &[&Dialogue]) -> Result<(Tape, crate::model::BatchLoss)> {
        let mut tape = Tape::with_params(&self.model.store);
        let loss = self.model.batch_loss(&mut tape, dialogues)?;
        Ok((tape, loss))
    }

    /// Loss on a batch with the current parameters, without updating.
    pub fn loss(&self, dialogues: &[&Dialogue]) -> Result<f64> {
        let (tape, l) = self.evaluate_batch(dialogues)?;
        Ok(tape.value(l.total).data()[0])
    }

    /// Loss of the first batch the next epoch would train on.
    pub fn next_step_loss(&self, train: &Corpus) -> Result<f64> {
        let batches = self.batches(train, self.epoch);
        let first = batches
            .first()
            .ok_or_else(|| Error::invalid("training corpus is empty"))?;
        let ds: Vec<&Dialogue> = first.iter().map(|&i| &train.dialogues[i]).collect();
        self.loss(&ds)
    }

    /// Forward, backward and one optimizer update. Returns the pre-update loss.
    pub fn step(&mut self, dialogues: &[&Dialogue], batch: usize) -> Result<f64> {
        let (mut tape, l) = self.evaluate_batch(dialogues)?;
        let total = tape.value(l.total).data()[0];
        if !total.is_finite() {
            return Err(Error::Diverged(Box::new(Divergence {
                epoch: self.epoch + 1,
                batch,
                dialogues: dialogues.iter().map(|d| d.id).collect(),
                labels: l.labels.clone(),
                ce: tape.value(l.ce).data()[0],
                contrast: l.contrast.map(|c| tape.value(c).data()[0]),
            })));
        }
        tape.backward(l.total)?;
        let grads: Vec<Vec<f64>> = tape.param_vars().iter().map(|&v| tape.grad_or_zeros(v)).collect();
        self.optimizer.step(&mut self.model.store, &grads)?;
        Ok(total)
    }

    pub fn run_epoch(&mut self, train: &Corpus, val: Option<&Corpus>) -> Result<EpochOutcome> {
        self.model.config.check_corpus(train)?;
        let previous_best = self.best();
        let mut weighted = 0.0;
        let mut seen = 0usize;
        for (b, batch) in self.batches(train, self.epoch).into_iter().enumerate() {
            let ds: Vec<&Dialogue> = batch.iter().map(|&i| &train.dialogues[i]).collect();
            let n: usize = ds.iter().map(|d| d.len()).sum();
            weighted += self.step(&ds, b)? * n as f64;
            seen += n;
        }
        if seen == 0 {
            return Err(Error::invalid("training corpus is empty"));
        }
        let val_weighted_f1 = match val {
            Some(v) if v.num_utterances() > 0 => Some(self.evaluate(v)?.weighted_f1),
            _ => None,
        };
        self.epoch += 1;
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: weighted / seen as f64,
            val_weighted_f1,
        };
        self.history.push(record);
        let improved = match (val_weighted_f1, previous_best) {
            (Some(f), Some((_, b))) => f > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        Ok(EpochOutcome { record, improved })
    }

    pub fn evaluate(&self, corpus: &Corpus) -> Result<EvalReport> {
        self.model.evaluate(corpus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conlearn::ContrastiveConfig;
    use crate::data::{generate_corpus, CorpusSpec, CorpusSplits, SplitSizes};
    use crate::head::ClassifierConfig;
    use crate::mcn::McnConfig;
    use crate::model::{Ablation, ModelConfig};
    use crate::psa::PsaConfig;

    fn config(ablation: Ablation, lambda: f64) -> ModelConfig {
        ModelConfig {
            num_classes: 2,
            text_dim: 6,
            audio_dim: 5,
            visual_dim: 4,
            psa: PsaConfig {
                num_branches: 2,
                channels: 8,
                se_reduction: 2,
                ..PsaConfig::default()
            },
            mcn: McnConfig {
                model_dim: 8,
                num_heads: 2,
                num_layers: 1,
                ffn_dim: 16,
                ..McnConfig::default()
            },
            contrastive: ContrastiveConfig {
                projection_dim: 8,
                ..ContrastiveConfig::default()
            },
            classifier: ClassifierConfig {
                hidden_dim: 16,
                mlp_dim: 8,
            },
            lambda,
            ablation,
        }
    }

    fn corpus(separation: f64) -> CorpusSplits {
        generate_corpus(&CorpusSpec {
            dialogues: SplitSizes {
                train: 8,
                val: 3,
                test: 0,
            },
            utterances: [3, 6],
            frames: [2, 4],
            num_classes: 2,
            text_dim: 6,
            audio_dim: 5,
            visual_dim: 4,
            separation,
            latent_noise: 0.3,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    fn trainer(ablation: Ablation, lambda: f64) -> Trainer {
        let opt = OptimizerConfig {
            learning_rate: 1e-2,
            ..OptimizerConfig::default()
        };
        let tc = TrainConfig {
            epochs: 20,
            batch_size: 8,
        };
        Trainer::new(Model::new(config(ablation, lambda), 11).unwrap(), opt, tc, 11).unwrap()
    }

    #[test]
    fn batches_cover_every_dialogue_once() {
        let s = corpus(4.0);
        let t = trainer(Ablation::default(), 1.0);
        for epoch in 0..3 {
            let b = t.batches(&s.train, epoch);
            let mut all: Vec<usize> = b.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..8).collect::<Vec<_>>());
            for batch in &b[..b.len() - 1] {
                let n: usize = batch.iter().map(|&i| s.train.dialogues[i].len()).sum();
                assert!(n >= 8);
            }
        }
        assert_ne!(t.batches(&s.train, 0), t.batches(&s.train, 1));
    }

    #[test]
    fn separable_pair_reaches_perfect_train_f1() {
        let s = corpus(6.0);
        let mut t = trainer(
            Ablation {
                no_psa: false,
                no_mcn_cl: true,
            },
            0.0,
        );
        for _ in 0..20 {
            t.run_epoch(&s.train, Some(&s.val)).unwrap();
        }
        assert_eq!(t.evaluate(&s.train).unwrap().weighted_f1, 1.0);
    }

    #[test]
    fn same_seed_same_history() {
        let s = corpus(4.0);
        let run = || {
            let mut t = trainer(Ablation::default(), 1.0);
            for _ in 0..3 {
                t.run_epoch(&s.train, Some(&s.val)).unwrap();
            }
            t.history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases() {
        let s = corpus(4.0);
        let mut t = trainer(Ablation::default(), 1.0);
        let first = t.run_epoch(&s.train, None).unwrap().record.train_loss;
        for _ in 0..9 {
            t.run_epoch(&s.train, None).unwrap();
        }
        assert!(t.history.last().unwrap().train_loss < first);
        assert!(t.best().is_none());
    }

    #[test]
    fn cloned_state_resumes_identically() {
        let s = corpus(4.0);
        let mut a = trainer(Ablation::default(), 1.0);
        a.run_epoch(&s.train, None).unwrap();
        let b = a.clone();
        assert_eq!(a.next_step_loss(&s.train).unwrap(), b.next_step_loss(&s.train).unwrap());
    }

    #[test]
    fn nan_loss_reports_batch() {
        let mut s = corpus(4.0);
        s.train.dialogues[2].utterances[0].text[0] = f64::NAN;
        let mut t = trainer(Ablation::default(), 1.0);
        let err = t.run_epoch(&s.train, None).unwrap_err();
        assert!(err.is_numerical(), "{err:?}");
    }
}
