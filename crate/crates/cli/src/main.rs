//! `fincon` command-line entry point.
//!
//! Exit codes: 0 on success, 1 for configuration or input-data problems,
//! 2 for failures while running. Diagnostics go to standard error; results
//! are written to files in the run directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fincon::backtest::{self, gateway_from_config, BacktestError, Session};
use fincon::config::{ConfigError, RunConfig};
use fincon::portfolio::select_stocks;

#[derive(Debug, Parser)]
#[command(name = "fincon", version, about = "Manager-analyst LLM trading backtester")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Scripted responses (JSONL); forces the offline backend.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,

    /// Config override `section.key=value`; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Seed forwarded to the language-model backend.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and check every configured data file.
    ValidateData,
    /// Run the training episodes.
    Train,
    /// Run the test pass with the trained prompts and memory.
    Test,
    /// Recompute report.json and metrics.csv from the run directory.
    Report,
    /// Pick a diversified stock pool from the configured universe.
    SelectStocks,
}

/// Failure classified by exit code.
enum Failure {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<BacktestError> for Failure {
    fn from(e: BacktestError) -> Self {
        if e.is_input_error() {
            Failure::Input(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Input(e.into())
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    let path = match (&cli.config, &cli.command) {
        (Some(p), _) => p.clone(),
        (None, Command::Report) => cli.run_dir.join("config.used.json"),
        (None, _) => {
            return Err(Failure::Input(anyhow::anyhow!("--config is required")));
        }
    };
    Ok(RunConfig::load(&path, &overrides)?)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let config = load_config(cli)?;
    let mock = cli.mock_script.as_deref();
    match cli.command {
        Command::ValidateData => {
            let session = Session::load(config)?;
            let days = session.market.calendar().days();
            eprintln!(
                "ok: {} tickers, {} trading days ({} .. {}), {} documents",
                session.config.run.tickers.len(),
                days.len(),
                days.first().map(|d| d.to_string()).unwrap_or_default(),
                days.last().map(|d| d.to_string()).unwrap_or_default(),
                session.market.total_documents()
            );
            session.train_dates()?;
            if session.config.run.test_start.is_some() || session.config.run.test_end.is_some() {
                session.test_dates()?;
            }
        }
        Command::Train => {
            let session = Session::load(config)?;
            let gateway = gateway_from_config(&session.config, mock, session.config.run.seed)?;
            let outcome = backtest::train(&session, &gateway, &cli.run_dir)?;
            for t in &outcome.trajectories {
                eprintln!(
                    "episode {}: objective {:+.6}, {} days",
                    t.episode,
                    t.objective,
                    t.records.len()
                );
            }
            eprintln!(
                "{} belief updates{}; artifacts in {}",
                outcome.updates.len(),
                if outcome.stopped_early { " (converged early)" } else { "" },
                cli.run_dir.display()
            );
        }
        Command::Test => {
            let session = Session::load(config)?;
            let make = |seed: u64| gateway_from_config(&session.config, mock, seed);
            let outcome = backtest::test(&session, &cli.run_dir, &make)?;
            let m = &outcome.report.metrics;
            eprintln!(
                "test: CR {:+.3}%, SR {}, MDD {:.3}%",
                m.cumulative_return_pct,
                m.sharpe_ratio.map_or_else(|| "n/a".to_string(), |s| format!("{s:.4}")),
                m.max_drawdown_pct
            );
        }
        Command::Report => {
            let m = backtest::report(&config, &cli.run_dir)?;
            eprintln!(
                "{}: CR {:+.3}% over {} days",
                m.episode, m.cumulative_return_pct, m.days
            );
        }
        Command::SelectStocks => {
            let candidates = backtest::stock_candidates(&config)?;
            let chosen = select_stocks(&candidates, config.portfolio.select_n, config.portfolio.min_news)
                .map_err(BacktestError::from)?;
            write_selection(&cli.run_dir, &chosen).map_err(Failure::Runtime)?;
            eprintln!("selected: {}", chosen.join(", "));
        }
    }
    Ok(())
}

fn write_selection(run_dir: &Path, chosen: &[String]) -> anyhow::Result<()> {
    std::fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let path = run_dir.join("selection.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({ "tickers": chosen }))?;
    std::fs::write(&path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
