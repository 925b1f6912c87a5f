//! Argument parsing and dispatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sacl_core::{Error, Result};

use crate::commands::{self, EvalOptions, Status};
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "sacl", version, about = "Structure-aware contrastive embeddings for few-shot learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory for all artifacts.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Run seed. Falls back to SACL_SEED, then the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads for episode and repetition parallelism (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long)]
    pub preset: Option<String>,
    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher and the encoder.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        tau_hot: Option<f64>,
        #[arg(long)]
        tau_cold: Option<f64>,
        /// `adaptive` or a fixed value in [0, 1].
        #[arg(long)]
        lambda: Option<String>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        base_csv: Option<PathBuf>,
        #[arg(long)]
        novel_csv: Option<PathBuf>,
    },
    /// Episode evaluation of a trained encoder.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        query: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        /// inductive, transductive or both.
        #[arg(long)]
        mode: Option<String>,
        /// Also evaluate over the joint base + novel label space.
        #[arg(long)]
        gfsl: bool,
        /// Joint-accuracy arithmetic from ACC_BASE,ACC_NOVEL,BASE_CLASSES,NOVEL_CLASSES.
        #[arg(long, value_name = "ACC_B,ACC_N,C_B,C_N")]
        gfsl_from: Option<String>,
        /// Encoder checkpoint (defaults to OUT/encoder.bin).
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        base_csv: Option<PathBuf>,
        #[arg(long)]
        novel_csv: Option<PathBuf>,
    },
    /// Compare analytical loss gradients with finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Random problems per grid cell.
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Alignment/uniformity decomposition error against sample size.
    Theorem {
        #[command(flatten)]
        common: Common,
        /// Comma-separated increasing sample sizes.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Loss, temperature or batch-size ablation with accuracy curves.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// loss, temperature or batch.
        #[arg(long)]
        study: Option<String>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Train CL, SCL and SACL encoders and evaluate them on the same episodes.
    CompareLosses {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
}

fn push<V: ToString>(overrides: &mut Vec<(String, String)>, key: &str, value: Option<V>) {
    if let Some(v) = value {
        overrides.push((key.to_string(), v.to_string()));
    }
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn resolve(common: &Common, mut specific: Vec<(String, String)>, fallback_file: Option<&Path>) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    overrides.append(&mut specific);
    push(&mut overrides, "seed", common.seed);
    let env_seed = match std::env::var("SACL_SEED") {
        Ok(v) => Some(
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("SACL_SEED = '{v}' is not an integer")))?,
        ),
        Err(_) => None,
    };
    let file = common.config.as_deref().or(fallback_file);
    RunConfig::resolve(common.preset.as_deref(), file, env_seed, &overrides)
}

fn init_threads(n: usize) -> Result<()> {
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<Status> {
    match command {
        Command::Train {
            common,
            iterations,
            loss,
            tau_hot,
            tau_cold,
            lambda,
            batch_size,
            lr,
            base_csv,
            novel_csv,
        } => {
            let mut o = Vec::new();
            push(&mut o, "iterations", iterations);
            push(&mut o, "loss", loss);
            push(&mut o, "tau_hot", tau_hot);
            push(&mut o, "tau_cold", tau_cold);
            push(&mut o, "lambda", lambda);
            push(&mut o, "batch_size", batch_size);
            push(&mut o, "lr", lr);
            push(&mut o, "base_csv", path_str(base_csv));
            push(&mut o, "novel_csv", path_str(novel_csv));
            let cfg = resolve(&common, o, None)?;
            init_threads(common.threads)?;
            commands::train(&cfg, &common.out)
        }
        Command::Eval {
            common,
            way,
            shot,
            query,
            episodes,
            mode,
            gfsl,
            gfsl_from,
            encoder,
            base_csv,
            novel_csv,
        } => {
            let mut o = Vec::new();
            push(&mut o, "way", way);
            push(&mut o, "shot", shot);
            push(&mut o, "query", query);
            push(&mut o, "episodes", episodes);
            push(&mut o, "mode", mode);
            push(&mut o, "base_csv", path_str(base_csv));
            push(&mut o, "novel_csv", path_str(novel_csv));
            // reuse the training run's resolved settings when present
            let echoed = common.out.join("config.txt");
            let cfg = resolve(&common, o, echoed.exists().then_some(echoed.as_path()))?;
            init_threads(common.threads)?;
            let encoder = encoder.unwrap_or_else(|| common.out.join("encoder.bin"));
            commands::eval(
                &cfg,
                &common.out,
                &EvalOptions {
                    encoder: &encoder,
                    gfsl,
                    gfsl_from: gfsl_from.as_deref(),
                },
            )
        }
        Command::GradCheck { common, reps } => {
            let mut o = Vec::new();
            push(&mut o, "grad_reps", reps);
            let cfg = resolve(&common, o, None)?;
            init_threads(common.threads)?;
            commands::grad_check(&cfg, &common.out)
        }
        Command::Theorem {
            common,
            sizes,
            reps,
            tau,
        } => {
            let mut o = Vec::new();
            push(&mut o, "theorem_sizes", sizes);
            push(&mut o, "theorem_reps", reps);
            push(&mut o, "theorem_tau", tau);
            let cfg = resolve(&common, o, None)?;
            init_threads(common.threads)?;
            commands::theorem(&cfg, &common.out)
        }
        Command::Ablate {
            common,
            study,
            eval_every,
        } => {
            let mut o = Vec::new();
            push(&mut o, "study", study);
            push(&mut o, "eval_every", eval_every);
            let cfg = resolve(&common, o, None)?;
            init_threads(common.threads)?;
            commands::ablate(&cfg, &common.out)
        }
        Command::CompareLosses {
            common,
            iterations,
            episodes,
        } => {
            let mut o = Vec::new();
            push(&mut o, "iterations", iterations);
            push(&mut o, "episodes", episodes);
            let cfg = resolve(&common, o, None)?;
            init_threads(common.threads)?;
            commands::compare_losses(&cfg, &common.out)
        }
    }
}

/// Exit code 0 on success, 1 when a check fails, 2 on errors.
pub fn run(cli: Cli) -> ExitCode {
    match dispatch(cli.command) {
        Ok(Status::Pass) => ExitCode::SUCCESS,
        Ok(Status::Fail(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
