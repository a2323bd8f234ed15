//! `reto`: dataset generation, training, evaluation, prediction, ablation and attention analysis.

mod analyze;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use reto_core::RetoError;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "reto", version, about = "Rotary-enhanced transformer operator on point clouds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override any configuration key, e.g. `--set epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// full, no_rope (v1), no_sincos (v2) or neither (v3).
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic potential-flow samples and a split manifest.
    GenData {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train one variant; writes the best checkpoint, the last checkpoint and an epoch log.
    Train {
        /// Continue from this checkpoint, keeping its epoch count and statistics.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        /// Print every channel, not just the grouped scores.
        #[arg(long)]
        per_channel: bool,
        #[arg(long)]
        split: Option<String>,
    },
    /// Predict fields for one sample file.
    Predict {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train and evaluate all four variants under the same seeds and budget.
    Ablate,
    /// Attention-entropy distributions and optional per-query attention rows.
    AnalyzeAttention {
        /// Point counts to analyse (repeatable).
        #[arg(long = "resolution")]
        resolutions: Vec<usize>,
        /// Point index whose attention row is exported.
        #[arg(long)]
        query_point: Option<usize>,
        /// Allow resolutions above the configured cap.
        #[arg(long)]
        force: bool,
    },
}

/// An error with a chosen process exit status.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_MISMATCH: u8 = 4;
pub const EXIT_RESOURCE: u8 = 5;

pub fn exit_with(code: u8, message: impl Into<String>) -> anyhow::Error {
    Exit {
        code,
        message: message.into(),
    }
    .into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(RetoError::NonFiniteLoss { .. } | RetoError::NonFiniteGradient { .. }) = cause.downcast_ref::<RetoError>() {
            return EXIT_NUMERICAL;
        }
    }
    EXIT_INPUT
}

fn overrides(common: &Common, command: &Command) -> toml::Table {
    let mut t = toml::Table::new();
    let path = |p: &PathBuf| toml::Value::String(p.to_string_lossy().into_owned());
    if let Some(v) = common.seed {
        t.insert("seed".into(), toml::Value::Integer(v as i64));
    }
    if let Some(v) = &common.data_dir {
        t.insert("data_dir".into(), path(v));
    }
    if let Some(v) = &common.out_dir {
        t.insert("out_dir".into(), path(v));
    }
    if let Some(v) = &common.checkpoint {
        t.insert("checkpoint".into(), path(v));
    }
    if let Some(v) = &common.variant {
        t.insert("variant".into(), toml::Value::String(v.clone()));
    }
    if let Some(v) = common.epochs {
        t.insert("epochs".into(), toml::Value::Integer(v as i64));
    }
    match command {
        Command::GenData { samples: Some(s) } => {
            t.insert("samples".into(), toml::Value::Integer(*s as i64));
        }
        Command::Eval { split: Some(s), .. } => {
            t.insert("eval_split".into(), toml::Value::String(s.clone()));
        }
        Command::AnalyzeAttention {
            resolutions,
            query_point,
            ..
        } => {
            if !resolutions.is_empty() {
                let list = resolutions.iter().map(|r| toml::Value::Integer(*r as i64)).collect();
                t.insert("resolutions".into(), toml::Value::Array(list));
            }
            if let Some(q) = query_point {
                t.insert("query_point".into(), toml::Value::Integer(*q as i64));
            }
        }
        _ => {}
    }
    t
}

fn run(cli: Cli) -> Result<()> {
    let cfg: RunConfig = config::load(cli.common.config.as_deref(), overrides(&cli.common, &cli.command), &cli.common.sets)
        .map_err(|e| exit_with(EXIT_INPUT, format!("{e:#}")))?;
    let threads = cli.common.threads.unwrap_or(0);
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    log::debug!("effective configuration: {cfg:?}");

    match cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg),
        Command::Train { resume } => commands::train(&cfg, resume.as_deref()),
        Command::Eval { per_channel, .. } => commands::eval(&cfg, per_channel),
        Command::Predict { input, output } => commands::predict(&cfg, &input, &output),
        Command::Ablate => commands::ablate(&cfg),
        Command::AnalyzeAttention { force, .. } => analyze::analyze_attention(&cfg, force),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
