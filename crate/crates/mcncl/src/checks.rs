//! Finite-difference gradient checks over each module and the whole model.

use mcncl_core::conlearn::{modality_loss, ProjectionHeadParams};
use mcncl_core::data::{generate_corpus, CorpusSpec, Dialogue, SplitSizes};
use mcncl_core::gradcheck::{grad_check, GradCheckReport};
use mcncl_core::head::{self, ClassifierParams};
use mcncl_core::mcn::{mcn_forward, McnParams, ModalState, Modality};
use mcncl_core::model::Model;
use mcncl_core::psa::{psa_forward, PsaParams};
use mcncl_core::rng::{self, uniform};
use mcncl_core::{ParamStore, Result, Tape, Tensor, Var};

use crate::config::RunConfig;

/// Frames per clip and utterances per batch used by the checks.
pub const FRAMES: usize = 6;
pub const UTTERANCES: usize = 8;
pub const LAMBDAS: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.report.passed())
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.results
            .iter()
            .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
    }

    pub fn lines(&self) -> Vec<String> {
        self.results
            .iter()
            .map(|r| {
                format!(
                    "{:<18} max_rel_err={:.3e} worst={} checked={} {}",
                    r.name,
                    r.report.max_rel_err,
                    r.report.worst,
                    r.report.checked,
                    if r.report.passed() { "ok" } else { "FAIL" }
                )
            })
            .collect()
    }
}

/// Redraws every bias from `U(±0.2)` on a stream of its own, so that no ReLU
/// input sits exactly on the kink where the central difference straddles it.
pub fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let mut r = rng::derived(seed, 7);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with("bias") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = uniform(&shape, -0.2, 0.2, &mut r);
        }
    }
}

/// `Σ x ⊙ R` for a fixed random `R`, so every output entry gets a distinct weight.
fn probe(tape: &mut Tape, x: Var, r: &mut rng::Rng) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(uniform(&shape, -1.0, 1.0, r));
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn labels(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i % k).collect()
}

pub fn check_psa(cfg: &RunConfig, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let p = PsaParams::init(&mut store, &cfg.psa, "psa", &mut rng::seeded(cfg.seed))?;
    jitter_biases(&mut store, cfg.seed);
    let mut r = rng::derived(cfg.seed, 1);
    let x = uniform(&[FRAMES, cfg.psa.channels], -1.0, 1.0, &mut r);
    grad_check(&mut store, h, tol, |t| {
        let mut r = rng::derived(cfg.seed, 2);
        let xv = t.constant(x.clone());
        let y = psa_forward(t, xv, &p)?;
        probe(t, y, &mut r)
    })
}

pub fn check_mcn(cfg: &RunConfig, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let p = McnParams::init(&mut store, &cfg.mcn, "mcn", &mut rng::seeded(cfg.seed))?;
    jitter_biases(&mut store, cfg.seed);
    let mut r = rng::derived(cfg.seed, 1);
    let u = 3;
    let inputs: Vec<Tensor> = (0..3)
        .map(|_| uniform(&[u, cfg.mcn.model_dim], -1.0, 1.0, &mut r))
        .collect();
    grad_check(&mut store, h, tol, |t| {
        let mut r = rng::derived(cfg.seed, 2);
        let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let state = ModalState {
            text: v[0],
            audio: v[1],
            visual: v[2],
        };
        let out = mcn_forward(t, state, &p)?;
        let mut terms = Vec::new();
        for m in Modality::ALL {
            terms.push((probe(t, out.get(m), &mut r)?, 1.0));
        }
        t.combine(&terms)
    })
}

pub fn check_conlearn(cfg: &RunConfig, h: f64, tol: f64) -> Result<GradCheckReport> {
    let d = cfg.mcn.model_dim;
    let mut store = ParamStore::new();
    let p = ProjectionHeadParams::init(
        &mut store,
        d,
        cfg.contrastive.projection_dim,
        "proj",
        &mut rng::seeded(cfg.seed),
    );
    jitter_biases(&mut store, cfg.seed);
    let mut r = rng::derived(cfg.seed, 1);
    let feats: Vec<Tensor> = (0..3).map(|_| uniform(&[UTTERANCES, d], -1.0, 1.0, &mut r)).collect();
    let y = labels(UTTERANCES, cfg.model.num_classes);
    grad_check(&mut store, h, tol, |t| {
        let mut terms = Vec::new();
        for m in Modality::ALL {
            let f = t.constant(feats[m.index()].clone());
            let l = modality_loss(t, f, p.head(m), &y, &cfg.contrastive)?;
            terms.push((l, cfg.contrastive.weight(m)));
        }
        t.combine(&terms)
    })
}

pub fn check_head(cfg: &RunConfig, h: f64, tol: f64) -> Result<GradCheckReport> {
    let d = cfg.mcn.model_dim;
    let k = cfg.model.num_classes;
    let mut store = ParamStore::new();
    let p = ClassifierParams::init(
        &mut store,
        d,
        &cfg.classifier,
        k,
        "classifier",
        &mut rng::seeded(cfg.seed),
    )?;
    jitter_biases(&mut store, cfg.seed);
    let mut r = rng::derived(cfg.seed, 1);
    let feats: Vec<Tensor> = (0..3).map(|_| uniform(&[UTTERANCES, d], -1.0, 1.0, &mut r)).collect();
    let y = labels(UTTERANCES, k);
    grad_check(&mut store, h, tol, |t| {
        let v: Vec<Var> = feats.iter().map(|x| t.constant(x.clone())).collect();
        let l = head::logits(t, v[0], v[1], v[2], &p)?;
        head::cross_entropy_on_tape(t, l, &y)
    })
}

/// Two dialogues of four utterances, clips of [`FRAMES`] frames.
pub fn check_batch(cfg: &RunConfig) -> Result<Vec<Dialogue>> {
    let m = &cfg.model;
    let spec = CorpusSpec {
        dialogues: SplitSizes {
            train: 2,
            val: 0,
            test: 0,
        },
        utterances: [UTTERANCES / 2, UTTERANCES / 2],
        frames: [FRAMES, FRAMES],
        num_classes: m.num_classes,
        text_dim: m.text_dim,
        audio_dim: m.audio_dim,
        visual_dim: m.visual_dim,
        seed: cfg.seed,
        ..CorpusSpec::default()
    };
    let mut train = generate_corpus(&spec)?.train;
    // Cycle labels so every class has a positive pair.
    let k = m.num_classes;
    for (i, u) in train.dialogues.iter_mut().flat_map(|d| &mut d.utterances).enumerate() {
        u.label = i % k;
    }
    Ok(train.dialogues)
}

pub fn check_end_to_end(cfg: &RunConfig, lambda: f64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut mc = cfg.model_config();
    mc.lambda = lambda;
    let mut model = Model::new(mc, cfg.seed)?;
    jitter_biases(&mut model.store, cfg.seed);
    let batch = check_batch(cfg)?;
    let ds: Vec<&Dialogue> = batch.iter().collect();
    let frozen = model.clone();
    grad_check(&mut model.store, h, tol, |t| Ok(frozen.batch_loss(t, &ds)?.total))
}

/// Every module on its own, then the whole model for each λ in [`LAMBDAS`].
pub fn run_suite(cfg: &RunConfig, h: f64, tol: f64) -> Result<SuiteReport> {
    let mut results = Vec::new();
    let mut push = |name: String, report: GradCheckReport| results.push(CheckResult { name, report });
    push("psa".into(), check_psa(cfg, h, tol)?);
    push("mcn".into(), check_mcn(cfg, h, tol)?);
    push("conlearn".into(), check_conlearn(cfg, h, tol)?);
    push("head".into(), check_head(cfg, h, tol)?);
    for lambda in LAMBDAS {
        push(
            format!("end_to_end[λ={lambda}]"),
            check_end_to_end(cfg, lambda, h, tol)?,
        );
    }
    Ok(SuiteReport { results })
}
