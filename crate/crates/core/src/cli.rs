//! Command-line front end: `auction`, `train` and `eval`.
//!
//! Every artifact lands under `<run root>/`, where the run root is
//! `$DALA_RUN_ROOT` or `runs`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::market::{AuctionInstance, MarketError};
use crate::marl::{evaluate, train, EpochStats, MarlError};
use crate::telemetry::{token_accounting, write_jsonl, write_summary_csv, TelemetryHeader};
use crate::valuation::Tier;

pub const RUN_ROOT_ENV: &str = "DALA_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "dala",
    version,
    about = "Token-budgeted communication market for cooperative agents"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Override the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Episode-level worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Override the episode token budget.
    #[arg(long, global = true)]
    pub budget_override: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clear one auction instance (JSON) and write its outcome.
    Auction { instance: PathBuf },
    /// Train a team and write a checkpoint plus telemetry.
    Train { config: PathBuf },
    /// Evaluate a frozen checkpoint on fresh instances.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Marl(#[from] MarlError),
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("--workers must be at least 1")]
    Workers,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write(&mut out)
        .and_then(|_| out.flush())
        .map_err(io_err(path))
}

fn load_config(path: &Path, global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(budget) = global.budget_override {
        config.budget.episode_budget = budget;
    }
    Ok(config)
}

/// Parses arguments and runs the command; messages go to `out`.
pub fn run<W: Write>(cli: Cli, out: &mut W) -> Result<(), CliError> {
    if cli.global.workers == 0 {
        return Err(CliError::Workers);
    }
    let stdout_err = |source| CliError::Io {
        path: "<stdout>".into(),
        source,
    };
    match &cli.command {
        Command::Auction { instance } => {
            let text = fs::read_to_string(instance).map_err(io_err(instance))?;
            let parsed: AuctionInstance =
                serde_json::from_str(&text).map_err(|source| CliError::Parse {
                    path: instance.display().to_string(),
                    source,
                })?;
            let outcome = parsed.solve()?;
            let json = serde_json::to_string_pretty(&outcome).expect("outcome serialises");
            let dir = run_root().join("auction");
            create_dir(&dir)?;
            let stem = instance
                .file_stem()
                .map_or("instance".into(), |s| s.to_string_lossy());
            let path = dir.join(format!("{stem}.outcome.json"));
            write_file(&path, |w| writeln!(w, "{json}"))?;
            writeln!(out, "{json}").map_err(stdout_err)?;
        }
        Command::Train { config } => {
            let config = load_config(config, &cli.global)?;
            let dir = run_root().join(&config.run_id);
            create_dir(&dir)?;
            let result = train(&config, cli.global.workers)?;
            let header = TelemetryHeader::new(&config);
            Checkpoint::new(&config, config.training.epochs, result.params)
                .save(&dir.join("checkpoint.json"))?;
            write_file(&dir.join("rounds.jsonl"), |w| {
                write_jsonl(w, Some(&header), &result.records)
            })?;
            write_file(&dir.join("epochs.csv"), |w| {
                write_epochs(w, &header.config_hash, &result.epochs)
            })?;
            let tokens = token_accounting(&result.records);
            let mut rows = vec![
                ("config_hash".to_string(), header.config_hash.clone()),
                ("seed".into(), config.seed.to_string()),
                ("epochs".into(), config.training.epochs.to_string()),
                ("tokens_spent".into(), tokens.tokens_spent.to_string()),
                (
                    "tokens_per_episode".into(),
                    tokens.per_episode_mean.to_string(),
                ),
            ];
            if let Some(last) = result.epochs.last() {
                rows.push(("final_success_rate".into(), last.success_rate.to_string()));
                rows.push((
                    "final_mean_episode_reward".into(),
                    last.mean_episode_reward.to_string(),
                ));
            }
            write_file(&dir.join("summary.csv"), |w| write_summary_csv(w, &rows))?;
            writeln!(
                out,
                "trained {} for {} epochs -> {}",
                config.run_id,
                config.training.epochs,
                dir.display()
            )
            .map_err(stdout_err)?;
        }
        Command::Eval { checkpoint, config } => {
            let config = load_config(config, &cli.global)?;
            let ck = Checkpoint::load(checkpoint)?;
            ck.check_compatible(&config)?;
            let dir = run_root()
                .join(&config.run_id)
                .join(format!("eval-{}", config.budget.episode_budget));
            create_dir(&dir)?;
            let result = evaluate(&config, &ck.params, config.seed, cli.global.workers)?;
            let header = TelemetryHeader::new(&config);
            let tokens = token_accounting(&result.records);
            let mut rows = vec![
                ("config_hash".to_string(), header.config_hash.clone()),
                ("checkpoint_config_hash".into(), ck.config_hash.clone()),
                ("seed".into(), config.seed.to_string()),
                (
                    "episode_budget".into(),
                    config.budget.episode_budget.to_string(),
                ),
                ("episodes".into(), result.episodes.to_string()),
                ("success_rate".into(), result.success_rate.to_string()),
                ("tokens_spent".into(), tokens.tokens_spent.to_string()),
                (
                    "tokens_per_episode".into(),
                    tokens.per_episode_mean.to_string(),
                ),
            ];
            if let Some(s) = result.strategy {
                for tier in Tier::ALL {
                    rows.push((
                        format!("strategy_{}", tier.name()),
                        s.fraction(tier).to_string(),
                    ));
                }
            }
            for (tier, spent) in &tokens.per_tier {
                rows.push((format!("tokens_{}", tier.name()), spent.to_string()));
            }
            write_file(&dir.join("rounds.jsonl"), |w| {
                write_jsonl(w, Some(&header), &result.records)
            })?;
            write_file(&dir.join("summary.csv"), |w| write_summary_csv(w, &rows))?;
            let mut table = Vec::new();
            write_summary_csv(&mut table, &rows).map_err(stdout_err)?;
            out.write_all(&table).map_err(stdout_err)?;
        }
    }
    Ok(())
}

fn write_epochs<W: Write>(
    w: &mut W,
    config_hash: &str,
    epochs: &[EpochStats],
) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "epoch",
        "mean_episode_reward",
        "tokens_per_episode",
        "success_rate",
        "objective",
        "value_fn_loss",
        "value_loss",
        "entropy",
        "value_critical",
        "value_non_critical",
        "config_hash",
    ])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for e in epochs {
        out.write_record([
            e.epoch.to_string(),
            e.mean_episode_reward.to_string(),
            e.tokens_per_episode.to_string(),
            e.success_rate.to_string(),
            e.objective.to_string(),
            e.value_fn_loss.to_string(),
            e.value_loss.to_string(),
            e.entropy.to_string(),
            opt(e.value_critical),
            opt(e.value_non_critical),
            config_hash.to_string(),
        ])?;
    }
    out.flush()
}
