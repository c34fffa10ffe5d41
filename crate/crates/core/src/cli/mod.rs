//! `embodied` command-line harness: batch jobs driven by a TOML config.
//!
//! Every run directory gets `config.resolved.toml`, a line-delimited `metrics.jsonl`
//! and a `summary.txt`. Exit codes: 0 success, 2 config error, 3 data error,
//! 4 acceptance failure.
//!
//! Environment overrides: `EMBRL_CONFIG`, `EMBRL_SEED`, `EMBRL_OUT`, `EMBRL_WORKERS`,
//! `EMBRL_RESUME`. Command-line flags win over the environment, which wins over the file.

mod commands;
pub mod config;
mod report;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{CommandKind, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("data error: {0}")]
    Data(String),
    #[error("acceptance failure: {0}")]
    Acceptance(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io(_) => 3,
            CliError::Acceptance(_) => 4,
        }
    }

    fn config(msg: impl Into<String>) -> Self {
        CliError::Config(vec![msg.into()])
    }

    fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "embodied", version, about = "Reward, RL, curriculum, distillation and MoT experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run config; defaults apply when absent.
    #[arg(long, global = true, env = "EMBRL_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "EMBRL_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "EMBRL_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "EMBRL_WORKERS")]
    pub workers: Option<usize>,
    /// Continue an interrupted run in the same output directory.
    #[arg(long, global = true, env = "EMBRL_RESUME")]
    pub resume: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic task pool.
    GenPool,
    /// Score a predictions file against a targets pool.
    RewardEval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// GRPO training on a pool.
    RlTrain {
        /// Stop after this many update steps in this invocation; continue with --resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Alternating RL and rejection-sampling fine-tuning cycles.
    Iterate {
        /// Stop after this many cycles in this invocation; continue with --resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// On-policy distillation, optionally compared with the offline baseline.
    Opd,
    /// Mask, routing, probe and gradient suites for the MoT kernel.
    MotCheck,
    /// Evaluate a pool and keep its partial-success frontier.
    PoolFilter,
    /// Summary tables for a metrics stream (a run directory or a .jsonl file).
    Report { path: PathBuf },
}

impl Command {
    fn kind(&self) -> Option<CommandKind> {
        Some(match self {
            Command::GenPool => CommandKind::GenPool,
            Command::RewardEval { .. } => CommandKind::RewardEval,
            Command::RlTrain { .. } => CommandKind::RlTrain,
            Command::Iterate { .. } => CommandKind::Iterate,
            Command::Opd => CommandKind::Opd,
            Command::MotCheck => CommandKind::MotCheck,
            Command::PoolFilter => CommandKind::PoolFilter,
            Command::Report { .. } => return None,
        })
    }
}

/// Loads the config file (if any), applies overrides and validates for `kind`.
pub fn resolve_config(common: &CommonArgs, command: &Command, kind: CommandKind) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Command::RewardEval { predictions, targets } = command {
        if predictions.is_some() {
            cfg.reward_eval.predictions = predictions.clone();
        }
        if targets.is_some() {
            cfg.reward_eval.targets = targets.clone();
        }
    }
    let errors = cfg.validate(kind);
    if !errors.is_empty() {
        return Err(CliError::Config(errors));
    }
    Ok(cfg)
}

/// Parses `args` and runs the command.
pub fn run_from_args<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::config(e.to_string()))?;
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let Some(kind) = cli.command.kind() else {
        if let Command::Report { path } = &cli.command {
            print!("{}", report::render(path)?);
        }
        return Ok(());
    };
    if cli.common.resume && !matches!(kind, CommandKind::RlTrain | CommandKind::Iterate) {
        return Err(CliError::config("--resume applies to rl-train and iterate only"));
    }
    let cfg = resolve_config(&cli.common, &cli.command, kind)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::config(format!("workers: {e}")))?;
    pool.install(|| {
        let mut run = RunDir::open(&cfg, cli.common.resume)?;
        match &cli.command {
            Command::GenPool => commands::gen_pool(&cfg, &mut run),
            Command::RewardEval { .. } => commands::reward_eval(&cfg, &mut run),
            Command::RlTrain { stop_after } => commands::rl_train(&cfg, &mut run, *stop_after),
            Command::Iterate { stop_after } => commands::iterate(&cfg, &mut run, *stop_after),
            Command::Opd => commands::opd(&cfg, &mut run),
            Command::MotCheck => commands::mot_check(&cfg, &mut run),
            Command::PoolFilter => commands::pool_filter(&cfg, &mut run),
            Command::Report { .. } => unreachable!("handled above"),
        }
    })
}

/// Binary entry point.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// An output directory with its single metrics writer.
pub(crate) struct RunDir {
    pub dir: PathBuf,
    pub resume: bool,
    metrics: BufWriter<File>,
    lines: usize,
}

impl RunDir {
    fn open(cfg: &RunConfig, resume: bool) -> Result<Self, CliError> {
        let dir = cfg.out.clone();
        fs::create_dir_all(&dir)?;
        let resolved = cfg.to_toml();
        let resolved_path = config::resolved_path(&dir);
        let metrics_path = dir.join("metrics.jsonl");
        if resume {
            match fs::read_to_string(&resolved_path) {
                Ok(old) if old == resolved => {}
                Ok(_) => {
                    return Err(CliError::config(format!(
                        "cannot resume: {} was produced by a different config",
                        dir.display()
                    )))
                }
                Err(_) => return Err(CliError::config(format!("cannot resume: no run in {}", dir.display()))),
            }
        } else {
            fs::write(&resolved_path, &resolved)?;
            File::create(&metrics_path)?;
        }
        let metrics = BufWriter::new(OpenOptions::new().append(true).create(true).open(&metrics_path)?);
        Ok(Self {
            dir,
            resume,
            metrics,
            lines: if resume { count_lines(&metrics_path)? } else { 0 },
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Appends one record tagged with `event` and flushes it.
    pub fn emit<T: Serialize>(&mut self, event: &str, record: &T) -> Result<(), CliError> {
        let mut value = serde_json::to_value(record).map_err(CliError::data)?;
        match &mut value {
            serde_json::Value::Object(map) => {
                map.insert("event".into(), event.into());
            }
            other => {
                *other = serde_json::json!({ "event": event, "value": other.clone() });
            }
        }
        serde_json::to_writer(&mut self.metrics, &value).map_err(CliError::data)?;
        self.metrics.write_all(b"\n")?;
        self.metrics.flush()?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    /// Drops metrics written after the last checkpoint.
    pub fn truncate_metrics(&mut self, keep: usize) -> Result<(), CliError> {
        self.metrics.flush()?;
        let path = self.path("metrics.jsonl");
        let kept: Vec<String> = BufReader::new(File::open(&path)?).lines().take(keep).collect::<Result<_, _>>()?;
        if kept.len() < keep {
            return Err(CliError::Data(format!("metrics stream shorter than checkpoint ({} < {keep})", kept.len())));
        }
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        write_atomic(&path, text.as_bytes())?;
        self.metrics = BufWriter::new(OpenOptions::new().append(true).open(&path)?);
        self.lines = keep;
        Ok(())
    }

    pub fn write_summary(&self, text: &str) -> Result<(), CliError> {
        fs::write(self.path("summary.txt"), text)?;
        print!("{text}");
        Ok(())
    }
}

fn count_lines(path: &Path) -> Result<usize, CliError> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f).lines().count()),
        Err(_) => Ok(0),
    }
}

/// Write to a sibling temp file, then rename over the target.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
