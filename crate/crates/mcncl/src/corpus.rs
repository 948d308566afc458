//! Corpus container: a binary file holding the train/val/test splits plus a
//! human-readable TOML manifest next to it.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "MCNCORP\0"                          magic
//! u32 version                          currently 1
//! u32 num_classes
//! u32 text_dim, u32 audio_dim, u32 visual_dim
//! u64 train_dialogues, u64 val_dialogues, u64 test_dialogues
//! index, one entry per dialogue in split order:
//!     u64 id, u64 byte_offset, u32 utterances
//! records, one per dialogue at its offset, per utterance:
//!     u32 speaker, u32 label, u32 frames,
//!     f64[text_dim], f64[audio_dim], f64[frames * visual_dim]
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is exact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mcncl_core::data::{Corpus, CorpusSpec, CorpusSplits, Dialogue, Utterance};
use mcncl_core::model::ModelConfig;
use mcncl_core::Tensor;

use crate::bytes::{header, Reader, Writer};
use crate::error::{CliError, FormatError};

pub const MAGIC: &[u8; 8] = b"MCNCORP\0";
pub const VERSION: u32 = 1;
const INDEX_ENTRY: usize = 20;

fn geometry(c: &Corpus) -> [usize; 4] {
    [c.num_classes, c.text_dim, c.audio_dim, c.visual_dim]
}

fn to_u32(v: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::Malformed(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode_corpus(splits: &CorpusSplits) -> Result<Vec<u8>, FormatError> {
    let parts = [&splits.train, &splits.val, &splits.test];
    let geo = geometry(&splits.train);
    for c in &parts[1..] {
        if geometry(c) != geo {
            return Err(FormatError::DimensionMismatch(format!(
                "splits disagree on classes/dims: {:?} vs {:?}",
                geo,
                geometry(c)
            )));
        }
    }
    for c in parts {
        c.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;
    }
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    for v in geo {
        w.u32(to_u32(v, "dimension")?);
    }
    for c in parts {
        w.u64(c.dialogues.len() as u64);
    }
    let dialogues: Vec<&Dialogue> = parts.iter().flat_map(|c| &c.dialogues).collect();
    let mut offset_slots = Vec::with_capacity(dialogues.len());
    for d in &dialogues {
        w.u64(d.id);
        offset_slots.push(w.len());
        w.u64(0);
        w.u32(to_u32(d.len(), "utterance count")?);
    }
    for (d, slot) in dialogues.iter().zip(offset_slots) {
        let at = w.len() as u64;
        w.patch_u64(slot, at);
        for u in &d.utterances {
            w.u32(u.speaker);
            w.u32(to_u32(u.label, "label")?);
            w.u32(to_u32(u.visual.rows(), "frame count")?);
            w.f64s(&u.text);
            w.f64s(&u.audio);
            w.f64s(u.visual.data());
        }
    }
    Ok(w.finish())
}

pub fn decode_corpus(bytes: &[u8]) -> Result<CorpusSplits, FormatError> {
    let mut r = Reader::new(bytes);
    header(&mut r, MAGIC, "corpus", VERSION)?;
    let mut geo = [0usize; 4];
    for (g, what) in geo
        .iter_mut()
        .zip(["num_classes", "text_dim", "audio_dim", "visual_dim"])
    {
        *g = r.u32(what)? as usize;
    }
    let [k, dt, da, dv] = geo;
    if k < 2 || dt == 0 || da == 0 || dv == 0 {
        return Err(FormatError::Malformed(format!("header declares classes/dims {geo:?}")));
    }
    let mut counts = [0usize; 3];
    for c in counts.iter_mut() {
        let n = r.u64("split size")?;
        if n.saturating_mul(INDEX_ENTRY as u64) > r.remaining() as u64 {
            return Err(FormatError::Truncated(format!("index for {n} dialogues does not fit")));
        }
        *c = n as usize;
    }
    let total = counts.iter().sum::<usize>();
    let mut index = Vec::with_capacity(total);
    for _ in 0..total {
        let id = r.u64("dialogue id")?;
        let offset = r.u64("dialogue offset")?;
        let n = r.u32("utterance count")? as usize;
        index.push((id, offset, n));
    }

    let mut dialogues = Vec::with_capacity(total);
    for (id, offset, n) in index {
        if offset != r.pos() as u64 {
            return Err(FormatError::Malformed(format!(
                "dialogue {id} indexed at offset {offset}, record found at {}",
                r.pos()
            )));
        }
        if n == 0 {
            return Err(FormatError::Malformed(format!("dialogue {id} has no utterances")));
        }
        let mut utterances = Vec::with_capacity(n.min(r.remaining()));
        for _ in 0..n {
            let speaker = r.u32("speaker")?;
            let label = r.u32("label")? as usize;
            let frames = r.u32("frame count")? as usize;
            if label >= k {
                return Err(FormatError::Malformed(format!(
                    "dialogue {id}: label {label} outside {k} classes"
                )));
            }
            if frames == 0 {
                return Err(FormatError::Malformed(format!("dialogue {id}: clip with no frames")));
            }
            let text = r.f64s(dt, "text features")?;
            let audio = r.f64s(da, "audio features")?;
            let visual = r.f64s(frames.saturating_mul(dv), "visual frames")?;
            utterances.push(Utterance {
                speaker,
                label,
                text,
                audio,
                visual: Tensor::matrix(frames, dv, visual).map_err(|e| FormatError::Malformed(e.to_string()))?,
            });
        }
        dialogues.push(Dialogue { id, utterances });
    }
    r.expect_end("last dialogue record")?;

    let mut rest = dialogues.into_iter();
    let mut split = |n: usize| Corpus {
        num_classes: k,
        text_dim: dt,
        audio_dim: da,
        visual_dim: dv,
        dialogues: rest.by_ref().take(n).collect(),
    };
    let splits = CorpusSplits {
        train: split(counts[0]),
        val: split(counts[1]),
        test: split(counts[2]),
    };
    let mut ids: Vec<u64> = [&splits.train, &splits.val, &splits.test]
        .iter()
        .flat_map(|c| c.dialogues.iter().map(|d| d.id))
        .collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(FormatError::Malformed("dialogue id appears twice".into()));
    }
    for c in [&splits.train, &splits.val, &splits.test] {
        c.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;
    }
    Ok(splits)
}

/// Rejects a corpus whose label space or feature widths differ from the model's.
pub fn check_fits(splits: &CorpusSplits, model: &ModelConfig) -> Result<(), FormatError> {
    let got = geometry(&splits.train);
    let want = [model.num_classes, model.text_dim, model.audio_dim, model.visual_dim];
    if got[0] != want[0] {
        return Err(FormatError::DimensionMismatch(format!(
            "corpus has {} classes, run config expects {}",
            got[0], want[0]
        )));
    }
    if got != want {
        return Err(FormatError::DimensionMismatch(format!(
            "corpus feature dims {:?}, run config expects {:?}",
            &got[1..],
            &want[1..]
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub dialogues: usize,
    pub utterances: usize,
    pub class_histogram: Vec<u64>,
}

/// Sidecar description of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub num_classes: usize,
    pub text_dim: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub seed: Option<u64>,
    pub train: SplitSummary,
    pub val: SplitSummary,
    pub test: SplitSummary,
}

impl Manifest {
    pub fn describe(splits: &CorpusSplits, spec: Option<&CorpusSpec>) -> Self {
        let summary = |c: &Corpus| SplitSummary {
            dialogues: c.dialogues.len(),
            utterances: c.num_utterances(),
            class_histogram: c.class_histogram(),
        };
        let t = &splits.train;
        Manifest {
            format_version: VERSION,
            num_classes: t.num_classes,
            text_dim: t.text_dim,
            audio_dim: t.audio_dim,
            visual_dim: t.visual_dim,
            seed: spec.map(|s| s.seed),
            train: summary(&splits.train),
            val: summary(&splits.val),
            test: summary(&splits.test),
        }
    }
}

/// `data/corpus.mcnc` → `data/corpus.manifest.toml`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.toml")
}

/// Writes the container and its manifest. `spec` records the generator seed.
pub fn save_corpus(splits: &CorpusSplits, path: &Path, spec: Option<&CorpusSpec>) -> Result<(), CliError> {
    let bytes = encode_corpus(splits).map_err(|e| CliError::format(path, e))?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
    let manifest = toml::to_string(&Manifest::describe(splits, spec)).map_err(|e| CliError::Config(e.to_string()))?;
    let mpath = manifest_path(path);
    std::fs::write(&mpath, manifest).map_err(|e| CliError::io(&mpath, e))
}

pub fn load_corpus(path: &Path) -> Result<CorpusSplits, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_corpus(&bytes).map_err(|e| CliError::format(path, e))
}
