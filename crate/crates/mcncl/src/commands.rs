//! Subcommand implementations. Each writes human-readable progress to `out`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mcncl_core::data::{generate_corpus, Corpus, CorpusSplits};
use mcncl_core::metrics::EvalReport;
use mcncl_core::model::{Ablation, Model};
use mcncl_core::train::{EpochRecord, Trainer};
use mcncl_core::Error;

use crate::checkpoint::Checkpoint;
use crate::checks::{run_suite, SuiteReport};
use crate::config::RunConfig;
use crate::corpus::{check_fits, load_corpus, save_corpus};
use crate::error::CliError;
use crate::report;

pub const METRICS_LOG: &str = "metrics.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CORPUS_FILE: &str = "corpus.mcnc";

/// Command-line settings that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub no_psa: bool,
    pub no_mcn_cl: bool,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.ablation.no_psa |= self.no_psa;
        cfg.ablation.no_mcn_cl |= self.no_mcn_cl;
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
    }
}

pub fn resolve_config(path: Option<&Path>, fallback: RunConfig, ov: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => fallback,
    };
    ov.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::io(path, e))
}

fn say(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    io(Path::new("<stdout>"), writeln!(out, "{line}"))
}

/// Loads the configured corpus file, or generates the synthetic one.
pub fn load_data(cfg: &RunConfig) -> Result<CorpusSplits, CliError> {
    let splits = match &cfg.data.corpus {
        Some(path) => {
            let s = load_corpus(path)?;
            check_fits(&s, &cfg.model_config()).map_err(|e| CliError::format(path, e))?;
            s
        }
        None => generate_corpus(&cfg.data.synthetic)?,
    };
    Ok(splits)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best: Option<(usize, f64)>,
    pub out_dir: PathBuf,
}

fn dump_divergence(dir: &Path, err: &Error) -> Result<(), CliError> {
    if let Error::Diverged(d) = err {
        let path = dir.join("divergence.txt");
        let text = format!(
            "epoch = {}\nbatch = {}\ndialogues = {:?}\nlabels = {:?}\ncross_entropy = {}\ncontrastive = {:?}\n",
            d.epoch, d.batch, d.dialogues, d.labels, d.ce, d.contrast
        );
        io(&path, fs::write(&path, text))?;
    }
    Ok(())
}

/// Trains for `cfg.train.epochs` epochs in total, continuing from `resume`
/// when given. Writes the metrics log and the best and last checkpoints.
pub fn train(cfg: &RunConfig, resume: Option<Checkpoint>, out: &mut dyn Write) -> Result<TrainSummary, CliError> {
    let (mut trainer, cfg) = match resume {
        Some(ck) => {
            let t = ck.restore()?;
            let mut c = ck.config;
            c.train.epochs = cfg.train.epochs;
            c.out_dir = cfg.out_dir.clone();
            (t, c)
        }
        None => {
            let model = Model::new(cfg.model_config(), cfg.seed)?;
            let t = Trainer::new(model, cfg.optimizer.clone(), cfg.train.clone(), cfg.seed)?;
            (t, cfg.clone())
        }
    };
    let dir = cfg.out_dir.clone();
    io(&dir, fs::create_dir_all(&dir))?;
    let data = load_data(&cfg)?;
    let cfg_path = dir.join("config.toml");
    io(&cfg_path, fs::write(&cfg_path, cfg.to_toml()?))?;

    let log_path = dir.join(METRICS_LOG);
    let mut log = String::new();
    for r in &trainer.history {
        log.push_str(&report::epoch_line(r));
        log.push('\n');
    }
    let val = (data.val.num_utterances() > 0).then_some(&data.val);
    while trainer.epoch < cfg.train.epochs {
        let outcome = match trainer.run_epoch(&data.train, val) {
            Ok(o) => o,
            Err(e) => {
                dump_divergence(&dir, &e)?;
                return Err(e.into());
            }
        };
        let line = report::epoch_line(&outcome.record);
        say(out, &line)?;
        log.push_str(&line);
        log.push('\n');
        io(&log_path, fs::write(&log_path, &log))?;
        if outcome.improved || val.is_none() {
            Checkpoint::capture(&trainer, &cfg).save(&dir.join(BEST_CHECKPOINT))?;
        }
    }
    io(&log_path, fs::write(&log_path, &log))?;
    Checkpoint::capture(&trainer, &cfg).save(&dir.join(LAST_CHECKPOINT))?;
    if let Some((e, f)) = trainer.best() {
        say(out, &format!("best validation weighted F1 {f:.4} at epoch {e}"))?;
    }
    Ok(TrainSummary {
        history: trainer.history.clone(),
        best: trainer.best(),
        out_dir: dir,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn pick(self, s: &CorpusSplits) -> &Corpus {
        match self {
            Split::Train => &s.train,
            Split::Val => &s.val,
            Split::Test => &s.test,
        }
    }
}

/// Evaluates a checkpoint on one split and writes `report.txt` and `report.toml`.
pub fn eval(
    checkpoint: &Path,
    corpus: Option<&Path>,
    split: Split,
    out_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<EvalReport, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let trainer = ck.restore()?;
    let mut data_cfg = ck.config.clone();
    if let Some(p) = corpus {
        data_cfg.data.corpus = Some(p.to_path_buf());
    }
    let data = load_data(&data_cfg)?;
    let part = split.pick(&data);
    if part.num_utterances() == 0 {
        return Err(CliError::Config(format!("{split:?} split is empty")));
    }
    let rep = trainer.evaluate(part)?;
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    io(&dir, fs::create_dir_all(&dir))?;
    let table = report::table(&rep);
    let txt = dir.join("report.txt");
    io(&txt, fs::write(&txt, &table))?;
    let machine = report::to_toml(&rep).map_err(|e| CliError::Config(e.to_string()))?;
    let tml = dir.join("report.toml");
    io(&tml, fs::write(&tml, machine))?;
    say(out, &table)?;
    Ok(rep)
}

/// Runs the gradient-check suite; fails if any check reaches `tolerance`.
pub fn gradcheck(cfg: &RunConfig, step: f64, tolerance: f64, out: &mut dyn Write) -> Result<SuiteReport, CliError> {
    let suite = run_suite(cfg, step, tolerance)?;
    for line in suite.lines() {
        say(out, &line)?;
    }
    if let Some(w) = suite.worst() {
        say(
            out,
            &format!(
                "worst offender: {} {} ({:.3e})",
                w.name, w.report.worst, w.report.max_rel_err
            ),
        )?;
    }
    if !suite.passed() {
        let w = suite.worst().expect("a failing suite has results");
        return Err(CliError::GradCheck(format!(
            "{} {} relative error {:.3e} ≥ {:.0e}",
            w.name, w.report.worst, w.report.max_rel_err, tolerance
        )));
    }
    Ok(suite)
}

/// Generates the configured synthetic corpus and writes it with its manifest.
pub fn gen_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<PathBuf, CliError> {
    io(&cfg.out_dir, fs::create_dir_all(&cfg.out_dir))?;
    let splits = generate_corpus(&cfg.data.synthetic)?;
    let path = cfg.out_dir.join(CORPUS_FILE);
    save_corpus(&splits, &path, Some(&cfg.data.synthetic))?;
    say(
        out,
        &format!(
            "wrote {} ({} / {} / {} utterances)",
            path.display(),
            splits.train.num_utterances(),
            splits.val.num_utterances(),
            splits.test.num_utterances()
        ),
    )?;
    Ok(path)
}

/// With no ablation flag set, trains the full model and both ablations into
/// sibling directories and prints a comparison. Otherwise a plain `train`.
pub fn ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<(String, TrainSummary)>, CliError> {
    if cfg.ablation != Ablation::default() {
        let name = if cfg.ablation.no_psa { "no_psa" } else { "no_mcn_cl" };
        return Ok(vec![(name.into(), train(cfg, None, out)?)]);
    }
    let variants = [
        ("full", Ablation::default()),
        (
            "no_psa",
            Ablation {
                no_psa: true,
                no_mcn_cl: false,
            },
        ),
        (
            "no_mcn_cl",
            Ablation {
                no_psa: false,
                no_mcn_cl: true,
            },
        ),
    ];
    let mut results = Vec::new();
    for (name, ablation) in variants {
        let mut c = cfg.clone();
        c.ablation = ablation;
        c.out_dir = cfg.out_dir.join(name);
        say(out, &format!("== {name}"))?;
        results.push((name.to_string(), train(&c, None, out)?));
    }
    say(out, "\nvariant     best val weighted F1")?;
    for (name, s) in &results {
        let f = s.best.map(|(_, f)| format!("{f:.4}")).unwrap_or_else(|| "n/a".into());
        say(out, &format!("{name:<11} {f}"))?;
    }
    Ok(results)
}
