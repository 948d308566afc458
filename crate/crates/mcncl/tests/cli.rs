mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mcncl::corpus::{manifest_path, Manifest};
use mcncl::RunConfig;
use mcncl_core::metrics::{weighted_f1, EvalReport};

fn mcncl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcncl")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&mcncl(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&mcncl(&[])), 1);
    assert_eq!(code(&mcncl(&["eval"])), 1);
    assert_eq!(code(&mcncl(&["--help"])), 0);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, "[mcn]\nnum_heds = 4\n").unwrap();
    let o = mcncl(&["train", "--config", unknown.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("num_heds"), "{}", stderr(&o));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[mcn]\nmodel_dim = 10\nnum_heads = 4\n").unwrap();
    assert_eq!(code(&mcncl(&["train", "--config", bad.to_str().unwrap()])), 1);

    let prior = dir.path().join("prior.toml");
    fs::write(
        &prior,
        "[model]\nnum_classes = 3\n[data.synthetic]\nnum_classes = 3\nclass_prior = [0.5, 0.5, 0.0]\n",
    )
    .unwrap();
    assert_eq!(code(&mcncl(&["gen-data", "--config", prior.to_str().unwrap()])), 1);

    let missing = dir.path().join("absent.toml");
    assert_eq!(code(&mcncl(&["train", "--config", missing.to_str().unwrap()])), 1);
}

#[test]
fn gradcheck_passes_on_the_tiny_model() {
    let o = mcncl(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("end_to_end"));
    assert!(out.contains("worst offender"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn gradcheck_rejects_step_out_of_range() {
    let o = mcncl(&["gradcheck", "--step", "1e-2"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn gen_data_writes_corpus_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_run(dir.path());
    let c = write_config(dir.path(), &cfg);
    let out = dir.path().join("data");
    let o = mcncl(&["gen-data", "--config", &c, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let corpus = out.join("corpus.mcnc");
    let m: Manifest = toml::from_str(&fs::read_to_string(manifest_path(&corpus)).unwrap()).unwrap();
    assert_eq!(m.num_classes, 3);
    assert_eq!(m.train.dialogues, 6);
    assert_eq!(m.seed, Some(cfg.data.synthetic.seed));
}

#[test]
fn train_logs_one_line_per_epoch_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_run(dir.path());
    let c = write_config(dir.path(), &cfg);
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = mcncl(&["train", "--config", &c, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(out.join("best.ckpt").exists() && out.join("last.ckpt").exists());
        logs.push(fs::read_to_string(out.join("metrics.log")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    let lines: Vec<&str> = logs[0].lines().collect();
    assert_eq!(lines.len(), cfg.train.epochs);
    for (i, l) in lines.iter().enumerate() {
        assert!(l.starts_with(&format!("epoch={} train_loss=", i + 1)), "{l}");
        assert!(l.contains(" val_weighted_f1="));
    }

    let other = dir.path().join("c");
    let o = mcncl(&["train", "--config", &c, "--seed", "9", "--out", other.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_ne!(fs::read_to_string(other.join("metrics.log")).unwrap(), logs[0]);
}

#[test]
fn resume_continues_to_the_epoch_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_run(dir.path());
    cfg.train.epochs = 2;
    let c = write_config(dir.path(), &cfg);
    let out = dir.path().join("r");
    assert_eq!(
        code(&mcncl(&["train", "--config", &c, "--out", out.to_str().unwrap()])),
        0
    );
    cfg.train.epochs = 3;
    let c = write_config(dir.path(), &cfg);
    let ck = out.join("last.ckpt");
    let o = mcncl(&[
        "train",
        "--config",
        &c,
        "--resume",
        ck.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("metrics.log")).unwrap().lines().count(), 3);
}

#[test]
fn eval_reports_match_the_oracle_and_memorize_the_training_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_run(dir.path());
    cfg.data.synthetic.separation = 8.0;
    cfg.train.epochs = 40;
    cfg.optimizer.learning_rate = 5e-3;
    let c = write_config(dir.path(), &cfg);
    let out = dir.path().join("m");
    assert_eq!(
        code(&mcncl(&["train", "--config", &c, "--out", out.to_str().unwrap()])),
        0
    );

    let ck = out.join("last.ckpt");
    let rep_dir = dir.path().join("report");
    let o = mcncl(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--split",
        "train",
        "--out",
        rep_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(rep_dir.join("report.txt"))
        .unwrap()
        .contains("weighted F1"));
    let rep: EvalReport = toml::from_str(&fs::read_to_string(rep_dir.join("report.toml")).unwrap()).unwrap();

    let data = mcncl_core::data::generate_corpus(&cfg.data.synthetic).unwrap();
    let labels = data.train.labels();
    for (c, row) in rep.confusion.iter().enumerate() {
        let support = labels.iter().filter(|&&y| y == c).count() as u64;
        assert_eq!(row.iter().sum::<u64>(), support);
        assert_eq!(rep.per_class[c].support, support);
    }
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for (y, row) in rep.confusion.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            preds.extend(std::iter::repeat_n(p, n as usize));
            truth.extend(std::iter::repeat_n(y, n as usize));
        }
    }
    assert_eq!(weighted_f1(&preds, &truth, 3).unwrap().weighted_f1, rep.weighted_f1);
    assert_eq!(rep.weighted_f1, 1.0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn eval_of_missing_or_corrupt_checkpoint_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("x.ckpt");
    fs::write(&bogus, b"MCNCORP\0garbage").unwrap();
    let o = mcncl(&["eval", "--checkpoint", bogus.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("E_MAGIC"), "{}", stderr(&o));
    let missing = dir.path().join("none.ckpt");
    assert_eq!(code(&mcncl(&["eval", "--checkpoint", missing.to_str().unwrap()])), 1);
}

#[test]
fn ablate_runs_all_three_variants() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_run(dir.path());
    cfg.train.epochs = 1;
    let c = write_config(dir.path(), &cfg);
    let out = dir.path().join("abl");
    let o = mcncl(&["ablate", "--config", &c, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for v in ["full", "no_psa", "no_mcn_cl"] {
        assert!(out.join(v).join("metrics.log").exists(), "{v}");
    }
    let single = dir.path().join("single");
    let o = mcncl(&["ablate", "--config", &c, "--no-psa", "--out", single.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(single.join("metrics.log").exists());
    let saved = RunConfig::load(&single.join("config.toml")).unwrap();
    assert!(saved.ablation.no_psa && !saved.ablation.no_mcn_cl);
}
