use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mcncl::checkpoint::Checkpoint;
use mcncl::commands::{self, Overrides, Split};
use mcncl::{CliError, RunConfig};

/// Multimodal emotion recognition: train, evaluate and verify the MCN-CL model.
#[derive(Parser)]
#[command(name = "mcncl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for parameter initialization and batch order.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Bypass the visual refinement module (mean-pool projected frames).
    #[arg(long)]
    no_psa: bool,
    /// Bypass the cross-attention stack and the contrastive loss.
    #[arg(long)]
    no_mcn_cl: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            no_psa: self.no_psa,
            no_mcn_cl: self.no_mcn_cl,
            out: self.out.clone(),
        }
    }

    fn resolve(&self, fallback: RunConfig) -> Result<RunConfig, CliError> {
        commands::resolve_config(self.config.as_deref(), fallback, &self.overrides())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.log, best.ckpt and last.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint up to the configured epoch count.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes report.txt and report.toml.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Corpus file to evaluate on instead of the checkpoint's data.
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Finite-difference gradient check of every module and the full model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Central-difference step, within [1e-7, 1e-4].
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Generate the configured synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the full model and both ablations, or one ablation if flagged.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = common.resolve(RunConfig::default())?;
            let ck = resume.as_deref().map(Checkpoint::load).transpose()?;
            commands::train(&cfg, ck, &mut out)?;
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            split,
        } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            commands::eval(&checkpoint, corpus.as_deref(), split, common.out.as_deref(), &mut out)?;
        }
        Command::Gradcheck {
            common,
            step,
            tolerance,
        } => {
            let cfg = common.resolve(RunConfig::tiny())?;
            commands::gradcheck(&cfg, step, tolerance, &mut out)?;
        }
        Command::GenData { common } => {
            let cfg = common.resolve(RunConfig::default())?;
            commands::gen_data(&cfg, &mut out)?;
        }
        Command::Ablate { common } => {
            let cfg = common.resolve(RunConfig::default())?;
            commands::ablate(&cfg, &mut out)?;
        }
    }
    let _ = out.flush();
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
