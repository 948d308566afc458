//! Run configuration, read from TOML.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mcncl_core::conlearn::ContrastiveConfig;
use mcncl_core::data::CorpusSpec;
use mcncl_core::head::ClassifierConfig;
use mcncl_core::mcn::McnConfig;
use mcncl_core::model::{Ablation, ModelConfig};
use mcncl_core::optim::OptimizerConfig;
use mcncl_core::psa::PsaConfig;
use mcncl_core::train::TrainConfig;

use crate::error::CliError;

/// Label space, raw feature widths and loss weighting of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_classes: usize,
    pub text_dim: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    /// Weight of the contrastive term.
    pub lambda: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            num_classes: m.num_classes,
            text_dim: m.text_dim,
            audio_dim: m.audio_dim,
            visual_dim: m.visual_dim,
            lambda: m.lambda,
        }
    }
}

/// Where training data comes from: a corpus file, or the generator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Corpus container to load. When absent, `synthetic` is generated.
    pub corpus: Option<PathBuf>,
    pub synthetic: CorpusSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives parameter initialization and batch order.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub psa: PsaConfig,
    pub mcn: McnConfig,
    pub contrastive: ContrastiveConfig,
    pub classifier: ClassifierConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            model: ModelSection::default(),
            psa: PsaConfig::default(),
            mcn: McnConfig::default(),
            contrastive: ContrastiveConfig::default(),
            classifier: ClassifierConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            data: DataSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.model.num_classes,
            text_dim: self.model.text_dim,
            audio_dim: self.model.audio_dim,
            visual_dim: self.model.visual_dim,
            psa: self.psa.clone(),
            mcn: self.mcn.clone(),
            contrastive: self.contrastive.clone(),
            classifier: self.classifier.clone(),
            lambda: self.model.lambda,
            ablation: self.ablation,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: mcncl_core::Error| CliError::Config(e.to_string());
        self.model_config().validate().map_err(bad)?;
        self.optimizer.validate().map_err(bad)?;
        if self.train.batch_size == 0 {
            return Err(CliError::Config("train.batch_size must be positive".into()));
        }
        if self.data.corpus.is_none() {
            self.data.synthetic.validate().map_err(bad)?;
            let s = &self.data.synthetic;
            let m = &self.model;
            if (s.num_classes, s.text_dim, s.audio_dim, s.visual_dim)
                != (m.num_classes, m.text_dim, m.audio_dim, m.visual_dim)
            {
                return Err(CliError::Config(format!(
                    "data.synthetic describes {} classes with dims [{}, {}, {}], \
                     model expects {} classes with dims [{}, {}, {}]",
                    s.num_classes,
                    s.text_dim,
                    s.audio_dim,
                    s.visual_dim,
                    m.num_classes,
                    m.text_dim,
                    m.audio_dim,
                    m.visual_dim
                )));
            }
        }
        Ok(())
    }

    /// Small widths that keep gradient checks to a few seconds.
    pub fn tiny() -> Self {
        let base = RunConfig::default();
        RunConfig {
            model: ModelSection {
                num_classes: 3,
                text_dim: 6,
                audio_dim: 5,
                visual_dim: 4,
                lambda: 1.0,
            },
            psa: PsaConfig {
                num_branches: 4,
                channels: 8,
                se_reduction: 4,
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
                ..base.contrastive.clone()
            },
            classifier: ClassifierConfig {
                hidden_dim: 8,
                mlp_dim: 6,
            },
            data: DataSection {
                corpus: None,
                synthetic: CorpusSpec {
                    num_classes: 3,
                    text_dim: 6,
                    audio_dim: 5,
                    visual_dim: 4,
                    ..CorpusSpec::default()
                },
            },
            ..base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips() {
        let c = RunConfig::tiny();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&d.to_toml().unwrap()).unwrap(), d);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::from_toml("sede = 3").is_err());
        assert!(RunConfig::from_toml("[mcn]\nnum_head = 2").is_err());
        assert!(RunConfig::from_toml("[data.synthetic]\nseperation = 2.0").is_err());
    }

    #[test]
    fn rejects_inconsistent_values() {
        assert!(RunConfig::from_toml("[mcn]\nnum_heads = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nnum_classes = 7").is_err());
        let ok = "[model]\nnum_classes = 7\n[data]\ncorpus = \"x.mcnc\"";
        assert_eq!(RunConfig::from_toml(ok).unwrap().model.num_classes, 7);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_toml("seed = 9\n[optimizer]\nlearning_rate = 0.01").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.optimizer.learning_rate, 0.01);
        assert_eq!(c.optimizer.beta2, 0.999);
        assert_eq!(c.mcn.num_heads, 4);
    }
}
