//! Command-line front end: a JSON run config in, CAVs, heads and reports out.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::{Command, RunConfig};
pub use error::{CliError, CliResult};
use output::OutputDir;

#[derive(Debug, Parser)]
#[command(name = "lgcav", version, about = "Language-guided concept activation vectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,

    /// Run config (JSON). Optional for `synth`; required otherwise.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Run with this single seed instead of the config's seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (overrides the config's `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Sub {
    /// Train one CAV per concept and seed.
    Train,
    /// Score trained CAVs: concept accuracy, concept-to-class, TCAV, recall@k.
    Eval,
    /// Fine-tune the head with concept-guided sample weights.
    Correct,
    /// Generate a synthetic world with planted concept directions.
    Synth,
    /// Grid over probe strategy, probe count and lambda.
    Sweep,
    /// Show the probe images, targets and weights each concept trains with.
    Probes,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Train => Command::Train,
            Sub::Eval => Command::Eval,
            Sub::Correct => Command::Correct,
            Sub::Synth => Command::Synth,
            Sub::Sweep => Command::Sweep,
            Sub::Probes => Command::Probes,
        }
    }
}

/// Loads the config, applies flag overrides, and returns it with the
/// directory its relative paths are resolved against.
pub fn resolve_config(cli: &Cli) -> CliResult<(RunConfig, PathBuf)> {
    let cmd = Command::from(cli.command);
    let (mut cfg, base) = match &cli.config {
        Some(path) => {
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (RunConfig::load(path)?, base)
        }
        None if cmd == Command::Synth => (RunConfig::default(), PathBuf::new()),
        None => return Err(CliError::Config(vec![format!("--config is required for {cmd}")])),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        // Flags are relative to the working directory, not the config.
        cfg.out = std::env::current_dir()
            .map(|cwd| cwd.join(out))
            .unwrap_or_else(|_| out.clone());
    }
    Ok((cfg, base))
}

/// Runs the parsed command on a pool of `--jobs` threads; returns the
/// files written.
pub fn execute(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    let (cfg, base) = resolve_config(cli)?;
    let cmd = Command::from(cli.command);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Config(vec!["--jobs: must be >= 1".into()]));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(vec![format!("--jobs: {e}")]))?;
    pool.install(|| {
        cfg.validate(cmd, &base)?;
        let mut out = OutputDir::create(&base.join(&cfg.out))?;
        commands::run(cmd, &cfg, &base, &mut out)?;
        Ok(out.written().to_vec())
    })
}
