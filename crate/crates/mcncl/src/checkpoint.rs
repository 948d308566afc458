//! Training checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MCNCKPT\0", u32 version
//! str  run config as TOML                   (u64 length + UTF-8)
//! u64  completed epochs
//! u64  parameter count, then per parameter:
//!      str name, u64 rank, u64[rank] shape, f64[numel] values
//! u64  optimizer step
//! u64  moment buffer count, then per buffer: u64 length, f64[length]  (first moments)
//! u64  moment buffer count, then per buffer: u64 length, f64[length]  (second moments)
//! u64  history length, then per epoch:
//!      u64 epoch, f64 train_loss, u8 has_val, f64 val_weighted_f1 (0 when absent)
//! ```

use std::path::Path;

use mcncl_core::model::Model;
use mcncl_core::optim::{Optimizer, OptimizerState};
use mcncl_core::train::{EpochRecord, Trainer};
use mcncl_core::{ParamStore, Tensor};

use crate::bytes::{header, Reader, Writer};
use crate::config::RunConfig;
use crate::error::{CliError, FormatError};

pub const MAGIC: &[u8; 8] = b"MCNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochRecord>,
}

fn buffers(w: &mut Writer, bufs: &[Vec<f64>]) {
    w.u64(bufs.len() as u64);
    for b in bufs {
        w.u64(b.len() as u64);
        w.f64s(b);
    }
}

fn read_buffers(r: &mut Reader<'_>, what: &str) -> Result<Vec<Vec<f64>>, FormatError> {
    let n = r.len(what)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.len(what)?;
        out.push(r.f64s(len, what)?);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, config: &RunConfig) -> Self {
        Checkpoint {
            config: config.clone(),
            epoch: trainer.epoch,
            params: trainer.model.store.clone(),
            optimizer: trainer.optimizer.state.clone(),
            history: trainer.history.clone(),
        }
    }

    /// Rebuilds the trainer; parameter names and shapes must match the config.
    pub fn restore(&self) -> Result<Trainer, CliError> {
        let mut model = Model::new(self.config.model_config(), self.config.seed)?;
        model.store.load_from(&self.params)?;
        let mut trainer = Trainer::new(
            model,
            self.config.optimizer.clone(),
            self.config.train.clone(),
            self.config.seed,
        )?;
        trainer.optimizer = Optimizer::from_state(
            self.config.optimizer.clone(),
            self.optimizer.clone(),
            &trainer.model.store,
        )?;
        trainer.epoch = self.epoch;
        trainer.history = self.history.clone();
        Ok(trainer)
    }

    pub fn encode(&self) -> Result<Vec<u8>, CliError> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_toml()?);
        w.u64(self.epoch as u64);
        w.u64(self.params.len() as u64);
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            w.str(name);
            w.u64(t.shape().len() as u64);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        w.u64(self.optimizer.step);
        buffers(&mut w, &self.optimizer.m);
        buffers(&mut w, &self.optimizer.v);
        w.u64(self.history.len() as u64);
        for h in &self.history {
            w.u64(h.epoch as u64);
            w.f64(h.train_loss);
            w.u8(h.val_weighted_f1.is_some() as u8);
            w.f64(h.val_weighted_f1.unwrap_or(0.0));
        }
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader::new(bytes);
        let fmt = |e: FormatError| CliError::Format {
            path: "<checkpoint>".into(),
            source: e,
        };
        header(&mut r, MAGIC, "checkpoint", VERSION).map_err(fmt)?;
        let config = RunConfig::from_toml(&r.str("config").map_err(fmt)?)?;
        let epoch = r.u64("epoch").map_err(fmt)? as usize;
        let mut params = ParamStore::new();
        let n = r.len("parameter count").map_err(fmt)?;
        for _ in 0..n {
            let name = r.str("parameter name").map_err(fmt)?;
            let rank = r.len("parameter rank").map_err(fmt)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("parameter shape").map_err(fmt)? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fmt(FormatError::Malformed(format!("{name}: shape overflows"))))?;
            let data = r.f64s(numel, "parameter values").map_err(fmt)?;
            let t = Tensor::new(shape, data).map_err(|e| fmt(FormatError::Malformed(e.to_string())))?;
            params.add(name, t);
        }
        let step = r.u64("optimizer step").map_err(fmt)?;
        let m = read_buffers(&mut r, "first moments").map_err(fmt)?;
        let v = read_buffers(&mut r, "second moments").map_err(fmt)?;
        let len = r.len("history").map_err(fmt)?;
        let mut history = Vec::with_capacity(len);
        for _ in 0..len {
            let epoch = r.u64("history epoch").map_err(fmt)? as usize;
            let train_loss = r.f64("history loss").map_err(fmt)?;
            let has_val = r.u8("history flag").map_err(fmt)?;
            let val = r.f64("history f1").map_err(fmt)?;
            history.push(EpochRecord {
                epoch,
                train_loss,
                val_weighted_f1: match has_val {
                    0 => None,
                    1 => Some(val),
                    b => return Err(fmt(FormatError::Malformed(format!("history flag {b}")))),
                },
            });
        }
        r.expect_end("history").map_err(fmt)?;
        Ok(Checkpoint {
            config,
            epoch,
            params,
            optimizer: OptimizerState { step, m, v },
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.encode()?).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            CliError::Format { source, .. } => CliError::format(path, source),
            other => other,
        })
    }
}
