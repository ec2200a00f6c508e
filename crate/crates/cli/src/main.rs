//! `mtplab`: run the multi-token prediction experiments from one config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtplab::train::Strategy;
use mtplab::MtpError;

mod commands;
mod config;
mod rundir;

use commands::{Ctx, TrainArgs};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_LOCKED: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {}", .0.display())]
    Missing(PathBuf),
    #[error("run directory is locked by another command: {} (delete it if stale)", .0.display())]
    Locked(PathBuf),
}

#[derive(Parser)]
#[command(name = "mtplab", version, about = "Multi-token prediction experiments on toy transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults to the run directory's snapshot.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config field for this command, e.g. `--set corpus.ambiguity=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn open(&self) -> anyhow::Result<Ctx> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Ctx::open(self.config.as_deref(), self.out.as_deref(), &overrides)
    }
}

#[derive(Args, Debug, Clone)]
struct Train {
    /// Discard an existing result or partial run of this stage.
    #[arg(long)]
    force: bool,
    /// Stop after this many steps; rerunning the command resumes.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Base checkpoint: a file, stage directory or run directory.
    #[arg(long)]
    base: Option<PathBuf>,
}

impl Train {
    fn args(&self) -> TrainArgs {
        TrainArgs {
            force: self.force,
            max_steps: self.max_steps,
        }
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config.
    DefaultConfig,
    /// Generate the train and eval corpora.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// NTP pretraining from scratch.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: Train,
    },
    /// Adapter finetuning of the base model (the marginalization baseline).
    FinetuneBaseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: Train,
    },
    /// Train MTP heads on a frozen backbone.
    TrainHeads {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: Train,
    },
    /// Joint finetuning of heads and backbone adapters.
    Joint {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: Train,
        /// none | warmup | diff-lr | warmup+diff-lr | diff-lr+whs
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        /// Heads-only result to warm start from (defaults to this run's).
        #[arg(long)]
        warmup_from: Option<PathBuf>,
    },
    /// Next and marginalized 2nd-token top-k accuracy of a base model.
    EvalMarginal {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "baseline")]
        stage: String,
        #[arg(long)]
        top_p: Option<f64>,
        /// Skip the comparison against exact marginalization.
        #[arg(long)]
        no_tv: bool,
    },
    /// Top-k accuracy of MTP heads.
    EvalHeads {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "heads_only")]
        stage: String,
    },
    /// KL between intermediate-layer and final distributions.
    ProbeKl {
        #[command(flatten)]
        common: Common,
        /// Stage to probe, or `init` for the untrained model.
        #[arg(long, default_value = "pretrain")]
        stage: String,
        #[arg(long, default_value = "eval")]
        corpus: String,
    },
    /// Output entropy and top-p counts over target spans.
    ProbeEntropy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "pretrain")]
        stage: String,
        #[arg(long, default_value = "eval")]
        corpus: String,
        #[arg(long)]
        top_p: Option<f64>,
    },
    /// Collect evaluations into the strategy matrix and probe tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Model label in the report.
        #[arg(long, default_value = "toy")]
        model: String,
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::DefaultConfig => print!("{}", commands::default_config()),
        Command::GenCorpus { common } => commands::gen_corpus(&mut common.open()?)?,
        Command::Pretrain { common, train } => {
            if train.base.is_some() {
                anyhow::bail!(CliError::Config("pretrain starts from scratch; --base does not apply".into()));
            }
            commands::pretrain(&mut common.open()?, &train.args())?
        }
        Command::FinetuneBaseline { common, train } => {
            commands::finetune_baseline(&mut common.open()?, train.base.as_deref(), &train.args())?
        }
        Command::TrainHeads { common, train } => {
            commands::train_heads(&mut common.open()?, train.base.as_deref(), &train.args())?
        }
        Command::Joint {
            common,
            train,
            strategy,
            warmup_from,
        } => commands::joint(
            &mut common.open()?,
            strategy,
            train.base.as_deref(),
            warmup_from.as_deref(),
            &train.args(),
        )?,
        Command::EvalMarginal {
            common,
            stage,
            top_p,
            no_tv,
        } => commands::eval_marginal(&mut common.open()?, &stage, top_p, !no_tv)?,
        Command::EvalHeads { common, stage } => commands::eval_heads(&mut common.open()?, &stage)?,
        Command::ProbeKl { common, stage, corpus } => commands::probe_kl(&mut common.open()?, &stage, &corpus)?,
        Command::ProbeEntropy {
            common,
            stage,
            corpus,
            top_p,
        } => commands::probe_entropy(&mut common.open()?, &stage, &corpus, top_p)?,
        Command::Report {
            common,
            model,
            tolerance,
        } => commands::report(&mut common.open()?, &model, tolerance)?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<CliError>() {
        return match e {
            CliError::Config(_) | CliError::Missing(_) => EXIT_CONFIG,
            CliError::Locked(_) => EXIT_LOCKED,
        };
    }
    match err.downcast_ref::<MtpError>() {
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        Some(MtpError::InvalidConfig(_)) => EXIT_CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
