//! Episode driver, training and test loops, and performance metrics.
//!
//! A decision taken after the close of day `t` is held over the `t -> t+1`
//! close-to-close transition, so an episode over `n` trading days yields
//! `n - 1` day records. Within an episode the risk monitor runs daily; the
//! over-episode belief update only runs between training episodes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::agents::{
    analyst_step, is_significant, manager_reflect, manager_step, send_feedback, slice_for,
    AgentContext, AgentError, AgentProfile, AgentRole, InsightMessage, MessageBus, MessageKind,
    Node, PromptSet, Reflection, RiskStatus, Topology, TradingDecision, TradingMode,
};
use crate::config::{ConfigError, RunConfig};
use crate::data_ingest::{
    assemble_observation, load_documents, load_price_series, log_return, DataError, DocKind,
    MarketData,
};
use crate::llm_gateway::{
    load_mock_script, CallRecord, GatewayError, HttpBackend, HttpSettings, LlmGateway, Phase,
    ENV_ENDPOINT,
};
use crate::memory::{Embedder, HashEmbedder, MemoryError, MemoryStore, HASH_EMBEDDING_DIM};
use crate::portfolio::{
    scale_to_positions, shrink_estimates, solve_mean_variance, MVInputs, PortfolioError,
    ReturnPanel, StockCandidate, WeightVector,
};
use crate::risk_control::{
    compare_and_update, convergence_check, cvar, var, BeliefUpdate,
    ReflectionTrigger, RiskError, RiskMonitor, RiskState,
};
use crate::{AgentId, Direction, Episode};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Portfolio(#[from] PortfolioError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("PnL series has zero volatility")]
    ZeroVolatility,
    #[error("need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("value series is empty")]
    EmptySeries,
    #[error("value series contains non-positive value {0}")]
    NonPositiveValue(f64),
    #[error("non-positive price {0}")]
    NonPositivePrice(f64),
    #[error("only {0} nonzero paired differences; need at least 6")]
    TooFewPairs(usize),
    #[error("paired series differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("missing training artifacts: {0}")]
    MissingTrainingArtifacts(String),
    #[error("no trajectory found in {0}")]
    MissingTrajectory(String),
    #[error("date range {0} has fewer than two trading days")]
    EmptyRange(String),
    #[error("a mock script cannot be combined with a network endpoint ({0})")]
    MockWithNetwork(String),
    #[error("no language-model backend: pass a mock script or set {ENV_ENDPOINT} / llm.endpoint")]
    NoBackend,
    #[error("episode {episode} failed on {date}: {source}")]
    EpisodeFailed {
        episode: Episode,
        date: NaiveDate,
        #[source]
        source: Box<BacktestError>,
    },
}

impl BacktestError {
    /// Whether the error stems from bad configuration or input data (as
    /// opposed to a failure while running).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            BacktestError::Config(_)
                | BacktestError::Data(_)
                | BacktestError::MissingTrainingArtifacts(_)
                | BacktestError::MissingTrajectory(_)
                | BacktestError::EmptyRange(_)
                | BacktestError::MockWithNetwork(_)
                | BacktestError::NoBackend
        ) || matches!(
            self,
            BacktestError::Gateway(GatewayError::SchemaError { .. })
                | BacktestError::Portfolio(PortfolioError::InsufficientCandidates { .. })
        )
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> BacktestError + '_ {
    move |e| BacktestError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// `r_t = ln(p_{t+1} / p_t) * action_t`.
pub fn daily_pnl(action: f64, p_t: f64, p_next: f64) -> Result<f64, BacktestError> {
    for p in [p_t, p_next] {
        if !(p > 0.0) {
            return Err(BacktestError::NonPositivePrice(p));
        }
    }
    Ok(action * (p_next / p_t).ln())
}

/// `r_t = sum_n w_n ln(p_{t+1,n} / p_{t,n})`.
pub fn portfolio_pnl(weights: &[f64], p_t: &[f64], p_next: &[f64]) -> Result<f64, BacktestError> {
    if weights.len() != p_t.len() || weights.len() != p_next.len() {
        return Err(BacktestError::LengthMismatch(weights.len(), p_t.len()));
    }
    let mut total = 0.0;
    for ((w, a), b) in weights.iter().zip(p_t).zip(p_next) {
        total += daily_pnl(*w, *a, *b)?;
    }
    Ok(total)
}

/// Cumulative return in percent: `100 * sum r_t`.
pub fn cumulative_return(pnl: &[f64]) -> Result<f64, BacktestError> {
    if pnl.is_empty() {
        return Err(BacktestError::EmptyTrajectory);
    }
    Ok(100.0 * pnl.iter().sum::<f64>())
}

/// `(mean(r) - rf) / std(r)` with the sample (n-1) standard deviation,
/// optionally scaled by `sqrt(252)`.
pub fn sharpe_ratio(pnl: &[f64], risk_free_daily: f64, annualize: bool) -> Result<f64, BacktestError> {
    if pnl.len() < 2 {
        return Err(BacktestError::InsufficientData {
            needed: 2,
            got: pnl.len(),
        });
    }
    let n = pnl.len() as f64;
    let mean = pnl.iter().sum::<f64>() / n;
    let var = pnl.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd <= 1e-15 * mean.abs().max(1.0) {
        return Err(BacktestError::ZeroVolatility);
    }
    let sr = (mean - risk_free_daily) / sd;
    Ok(if annualize { sr * 252f64.sqrt() } else { sr })
}

/// Largest peak-to-trough decline in percent.
pub fn max_drawdown(values: &[f64]) -> Result<f64, BacktestError> {
    if values.is_empty() {
        return Err(BacktestError::EmptySeries);
    }
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &v in values {
        if !(v > 0.0) {
            return Err(BacktestError::NonPositiveValue(v));
        }
        peak = peak.max(v);
        worst = worst.max((peak - v) / peak);
    }
    Ok(100.0 * worst)
}

/// Equity curve `capital * exp(cumsum r)`, starting with `capital` itself.
pub fn equity_curve(pnl: &[f64], capital: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(pnl.len() + 1);
    out.push(capital);
    let mut cum = 0.0;
    for r in pnl {
        cum += r;
        out.push(capital * cum.exp());
    }
    out
}

/// Discounted episode objective `sum_t alpha^t r_t`, `t` counted from zero.
pub fn objective_value(pnl: &[f64], alpha: f64) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for r in pnl {
        total += weight * r;
        weight *= alpha;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Number of nonzero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided Wilcoxon signed-rank test on `a - b`. Zero differences are
/// dropped; tied magnitudes share their average rank. Exact null
/// distribution up to 25 pairs, normal approximation with tie correction
/// beyond that.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, BacktestError> {
    if a.len() != b.len() {
        return Err(BacktestError::LengthMismatch(a.len(), b.len()));
    }
    let mut diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n < 6 {
        return Err(BacktestError::TooFewPairs(n));
    }
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    // Ranks are kept doubled so average ranks stay integral.
    let mut doubled = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        let r2 = (i + 1 + j + 1) as u64;
        for slot in doubled.iter_mut().take(j + 1).skip(i) {
            *slot = r2;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w_plus2: u64 = diffs
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total2 = (n * (n + 1)) as u64;
    let w_minus2 = total2 - w_plus2;
    let (w_plus, w_minus) = (w_plus2 as f64 / 2.0, w_minus2 as f64 / 2.0);

    let (p, exact) = if n <= 25 {
        // counts[s] = number of sign assignments with doubled W+ equal to s.
        let mut counts = vec![0f64; total2 as usize + 1];
        counts[0] = 1.0;
        for r in &doubled {
            let r = *r as usize;
            for s in (r..counts.len()).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w_plus2 as usize].iter().sum::<f64>() / all;
        let upper: f64 = counts[w_plus2 as usize..].iter().sum::<f64>() / all;
        ((2.0 * lower.min(upper)).min(1.0), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0), false)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_value: p,
        exact,
    })
}

// ---------------------------------------------------------------------------
// Trajectories

/// Everything recorded for one decision day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub date: NaiveDate,
    /// Close at which the decision's PnL is realized.
    pub next_date: NaiveDate,
    pub directions: BTreeMap<String, Direction>,
    pub weights: BTreeMap<String, f64>,
    /// Target share counts implied by the weights and capital.
    pub positions: BTreeMap<String, f64>,
    pub pnl: f64,
    /// Episode CVaR after including this day's PnL.
    pub cvar: Option<f64>,
    /// Risk alert raised by this day's PnL.
    pub alert: bool,
    pub trigger: Option<ReflectionTrigger>,
    /// Whether the manager decided under a risk alert carried from the prior day.
    pub decided_under_alert: bool,
    pub reflections: Vec<Reflection>,
    pub reasoning: String,
    pub insights: Vec<InsightMessage>,
    pub cited_memory_ids: Vec<String>,
    /// Envelopes delivered on the message bus for this day.
    pub messages: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode: Episode,
    pub records: Vec<DayRecord>,
    pub objective: f64,
}

impl Trajectory {
    pub fn new(episode: Episode, records: Vec<DayRecord>, discount: f64) -> Self {
        let objective = objective_value(&records.iter().map(|r| r.pnl).collect::<Vec<_>>(), discount);
        Self {
            episode,
            records,
            objective,
        }
    }

    pub fn pnl(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.pnl).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), BacktestError> {
        fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }

    pub fn read(path: &Path, episode: Episode, discount: f64) -> Result<Self, BacktestError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| BacktestError::Io {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", i + 1),
            })?);
        }
        Ok(Self::new(episode, records, discount))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episode: Episode,
    pub days: usize,
    pub cumulative_return_pct: f64,
    /// `None` when the PnL series has zero volatility.
    pub sharpe_ratio: Option<f64>,
    pub max_drawdown_pct: f64,
    pub var: f64,
    pub cvar: f64,
    pub cvar_alpha: f64,
    pub risk_free_daily: f64,
    pub annualized_sharpe: bool,
    pub objective: f64,
    pub final_equity: f64,
    pub alerts: usize,
    pub reflections: usize,
}

pub fn compute_metrics(trajectory: &Trajectory, config: &RunConfig) -> Result<MetricsReport, BacktestError> {
    let pnl = trajectory.pnl();
    let cr = cumulative_return(&pnl)?;
    let sharpe = match sharpe_ratio(&pnl, config.run.risk_free_daily, config.run.annualize_sharpe) {
        Ok(s) => Some(s),
        Err(BacktestError::ZeroVolatility | BacktestError::InsufficientData { .. }) => None,
        Err(e) => return Err(e),
    };
    let equity = equity_curve(&pnl, config.run.capital);
    Ok(MetricsReport {
        episode: trajectory.episode,
        days: pnl.len(),
        cumulative_return_pct: cr,
        sharpe_ratio: sharpe,
        max_drawdown_pct: max_drawdown(&equity)?,
        var: var(&pnl, config.risk.cvar_alpha)?,
        cvar: cvar(&pnl, config.risk.cvar_alpha)?,
        cvar_alpha: config.risk.cvar_alpha,
        risk_free_daily: config.run.risk_free_daily,
        annualized_sharpe: config.run.annualize_sharpe,
        objective: objective_value(&pnl, config.run.discount_alpha),
        final_equity: *equity.last().expect("equity has the starting point"),
        alerts: trajectory.records.iter().filter(|r| r.alert).count(),
        reflections: trajectory.records.iter().map(|r| r.reflections.len()).sum(),
    })
}

/// Per-day CSV: `date,pnl,equity,cvar,alert`. Equity is after the day's PnL.
pub fn metrics_csv(trajectory: &Trajectory, capital: f64) -> String {
    let equity = equity_curve(&trajectory.pnl(), capital);
    let mut out = String::from("date,pnl,equity,cvar,alert\n");
    for (r, e) in trajectory.records.iter().zip(&equity[1..]) {
        let cvar = r.cvar.map(|c| c.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.date, r.pnl, e, cvar, r.alert));
    }
    out
}

// ---------------------------------------------------------------------------
// Session setup

/// Loaded configuration plus market data.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: RunConfig,
    pub market: MarketData,
}

impl Session {
    pub fn load(config: RunConfig) -> Result<Self, BacktestError> {
        let mut prices = BTreeMap::new();
        for ticker in &config.run.tickers {
            let path = &config.data.prices[ticker];
            prices.insert(ticker.clone(), load_price_series(path, ticker)?);
        }
        let mut documents = Vec::new();
        for path in &config.data.documents {
            documents.extend(
                load_documents(path)?
                    .into_iter()
                    .filter(|d| config.run.tickers.contains(&d.ticker)),
            );
        }
        let market = MarketData::new(
            &config.run.tickers,
            prices,
            documents,
            config.data.momentum_window,
        )?;
        Ok(Self { config, market })
    }

    fn range(&self, name: &str, start: Option<NaiveDate>, end: Option<NaiveDate>) -> Result<Vec<NaiveDate>, BacktestError> {
        let days = self.market.calendar().days();
        let (Some(first), Some(last)) = (days.first(), days.last()) else {
            return Err(BacktestError::EmptyRange(name.to_string()));
        };
        let dates = self
            .market
            .calendar()
            .range(start.unwrap_or(*first), end.unwrap_or(*last));
        if dates.len() < 2 {
            return Err(BacktestError::EmptyRange(format!(
                "{name} {}..{}",
                start.unwrap_or(*first),
                end.unwrap_or(*last)
            )));
        }
        Ok(dates)
    }

    pub fn train_dates(&self) -> Result<Vec<NaiveDate>, BacktestError> {
        self.range("train", self.config.run.train_start, self.config.run.train_end)
    }

    pub fn test_dates(&self) -> Result<Vec<NaiveDate>, BacktestError> {
        self.range("test", self.config.run.test_start, self.config.run.test_end)
    }

    pub fn new_memory(&self) -> MemoryStore {
        MemoryStore::new(HASH_EMBEDDING_DIM, self.market.calendar().clone())
    }
}

/// Builds the gateway for a run. A mock script excludes any network
/// configuration, whether from the config file or the environment.
pub fn gateway_from_config(
    config: &RunConfig,
    mock_script: Option<&Path>,
    seed: u64,
) -> Result<LlmGateway, BacktestError> {
    let env_endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.trim().is_empty());
    match mock_script {
        Some(path) => {
            if let Some(e) = &config.llm.endpoint {
                return Err(BacktestError::MockWithNetwork(format!("llm.endpoint = {e}")));
            }
            if let Some(e) = env_endpoint {
                return Err(BacktestError::MockWithNetwork(format!("{ENV_ENDPOINT} = {e}")));
            }
            Ok(LlmGateway::mock(load_mock_script(path)?))
        }
        None => {
            let timeout = Duration::from_secs(config.llm.timeout_secs);
            let interval = Duration::from_millis(config.llm.min_interval_ms);
            let mut settings = HttpSettings::from_env(timeout, interval, Some(seed))
                .or_else(|| {
                    config.llm.endpoint.as_ref().map(|endpoint| HttpSettings {
                        endpoint: endpoint.clone(),
                        api_key: None,
                        model: String::new(),
                        timeout,
                        min_interval: interval,
                        seed: Some(seed),
                    })
                })
                .ok_or(BacktestError::NoBackend)?;
            if let Some(endpoint) = &config.llm.endpoint {
                settings.endpoint = endpoint.clone();
            }
            if let Some(model) = &config.llm.model {
                settings.model = model.clone();
            }
            Ok(LlmGateway::new(Box::new(HttpBackend::new(settings)?)))
        }
    }
}

// ---------------------------------------------------------------------------
// Episode driver

/// Borrowed handles for one episode.
pub struct Engine<'a> {
    pub config: &'a RunConfig,
    pub market: &'a MarketData,
    pub gateway: &'a LlmGateway,
    pub memory: &'a MemoryStore,
    pub embedder: &'a dyn Embedder,
}

/// A failed episode together with the days completed before the failure.
#[derive(Debug)]
pub struct EpisodeFailure {
    pub partial: Trajectory,
    pub error: BacktestError,
}

impl<'a> Engine<'a> {
    pub fn new(
        config: &'a RunConfig,
        market: &'a MarketData,
        gateway: &'a LlmGateway,
        memory: &'a MemoryStore,
    ) -> Self {
        Self {
            config,
            market,
            gateway,
            memory,
            embedder: &HashEmbedder,
        }
    }

    fn analysts(&self) -> &[AgentRole] {
        &self.config.agents.analysts
    }

    fn analyst_ids(&self) -> Vec<AgentId> {
        self.analysts().iter().map(|r| r.agent_id()).collect()
    }

    /// Runs one pass over `dates`. Decisions are taken on every date but the
    /// last, which only supplies the closing prices of the final transition.
    pub fn run_episode(
        &self,
        prompts: &PromptSet,
        episode: Episode,
        dates: &[NaiveDate],
    ) -> Result<Trajectory, EpisodeFailure> {
        let settings = self.config.agent_settings();
        let risk = self.config.risk_settings();
        let ctx = AgentContext {
            gateway: self.gateway,
            memory: self.memory,
            embedder: self.embedder,
            settings: &settings,
            episode,
            general_config: &self.config.run.general_config,
        };
        let bus = MessageBus::new(Topology::new(self.analyst_ids()));
        let mut monitor = RiskMonitor::new(risk.cvar_alpha, risk.min_history).map_err(|e| EpisodeFailure {
            partial: Trajectory::new(episode, Vec::new(), self.config.run.discount_alpha),
            error: e.into(),
        })?;
        let mut records: Vec<DayRecord> = Vec::new();
        let mut last_state: Option<RiskState> = None;

        for pair in dates.windows(2) {
            let (date, next) = (pair[0], pair[1]);
            match self.run_day(prompts, &ctx, &bus, &mut monitor, last_state.as_ref(), &records, date, next) {
                Ok((record, state)) => {
                    records.push(record);
                    last_state = Some(state);
                }
                Err(error) => {
                    return Err(EpisodeFailure {
                        partial: Trajectory::new(episode, records, self.config.run.discount_alpha),
                        error: BacktestError::EpisodeFailed {
                            episode,
                            date,
                            source: Box::new(error),
                        },
                    })
                }
            }
        }
        Ok(Trajectory::new(episode, records, self.config.run.discount_alpha))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_day(
        &self,
        prompts: &PromptSet,
        ctx: &AgentContext<'_>,
        bus: &MessageBus,
        monitor: &mut RiskMonitor,
        prior: Option<&RiskState>,
        done: &[DayRecord],
        date: NaiveDate,
        next: NaiveDate,
    ) -> Result<(DayRecord, RiskState), BacktestError> {
        let tickers = &self.config.run.tickers;
        let obs = assemble_observation(date, tickers, self.market)?;
        let window = self.config.portfolio.estimation_window;
        let trailing: BTreeMap<String, Vec<f64>> = tickers
            .iter()
            .map(|t| (t.clone(), self.market.trailing_returns(t, date, window)))
            .collect();

        let run_one = |role: &AgentRole| -> Result<Vec<InsightMessage>, AgentError> {
            let id = role.agent_id();
            let profile = AgentProfile::default_for(*role, ctx.general_config);
            let prompt = prompts.analyst_prompts.get(&id).map(String::as_str).unwrap_or("");
            let slice = slice_for(*role, &obs, &trailing);
            analyst_step(&profile, prompt, prompts.analyst_beliefs.get(&id), &slice, ctx)
        };
        let results: Vec<Result<Vec<InsightMessage>, AgentError>> = if self.config.agents.parallel {
            thread::scope(|s| {
                let handles: Vec<_> = self
                    .analysts()
                    .iter()
                    .map(|role| s.spawn(move || run_one(role)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("analyst worker panicked"))
                    .collect()
            })
        } else {
            self.analysts().iter().map(run_one).collect()
        };
        let mut insights = Vec::new();
        for (role, result) in self.analysts().iter().zip(results) {
            insights.extend(result?);
            bus.send(Node::Analyst(role.agent_id()), Node::Manager, MessageKind::Insight, date)?;
        }

        let status = RiskStatus {
            alert: prior.is_some_and(|s| s.alert),
            cvar: prior.and_then(|s| s.cvar),
            trigger: prior.and_then(|s| s.trigger),
        };
        let manager = AgentProfile::default_for(AgentRole::Manager, ctx.general_config);
        let mut decision = manager_step(
            &manager,
            prompts,
            date,
            tickers,
            &self.analyst_ids(),
            &insights,
            &status,
            self.config.run.trading_mode,
            ctx,
        )?;
        if self.config.run.trading_mode == TradingMode::Portfolio {
            decision.weights = self.portfolio_weights(&decision, &trailing)?;
        }

        let p_t: Vec<f64> = tickers
            .iter()
            .map(|t| self.market.close_on(t, date))
            .collect::<Result<_, _>>()?;
        let p_next: Vec<f64> = tickers
            .iter()
            .map(|t| self.market.close_on(t, next))
            .collect::<Result<_, _>>()?;
        let w: Vec<f64> = tickers.iter().map(|t| decision.weights[t]).collect();
        let positions = scale_to_positions(
            &WeightVector { w: w.clone() },
            self.config.run.capital,
            &p_t,
            self.config.portfolio.rounding,
        )?;
        let pnl = portfolio_pnl(&w, &p_t, &p_next)?;

        let state = monitor.observe(date, pnl);
        let mut reflections = Vec::new();
        if let Some(trigger) = state.trigger {
            bus.send(Node::RiskControl, Node::Manager, MessageKind::RiskAlert, date)?;
            let context = reflection_context(&decision, pnl, &state);
            reflections.push(manager_reflect(&manager, date, trigger, &context, ctx)?);
        }

        let prior_pnl: Vec<f64> = done.iter().map(|r| r.pnl).collect();
        let significant = is_significant(
            pnl,
            &prior_pnl,
            ctx.settings.feedback_sigma_multiple,
            ctx.settings.feedback_window,
        );
        let analysts = self.analyst_ids();
        send_feedback(&decision, pnl, significant, &analysts, ctx)?;
        for a in &analysts {
            bus.send(Node::Manager, Node::Analyst(a.clone()), MessageKind::Feedback, date)?;
        }

        let record = DayRecord {
            date,
            next_date: next,
            positions: tickers.iter().cloned().zip(positions).collect(),
            directions: decision.directions,
            weights: decision.weights,
            pnl,
            cvar: state.cvar,
            alert: state.alert,
            trigger: state.trigger,
            decided_under_alert: status.alert,
            reflections,
            reasoning: decision.reasoning,
            insights,
            cited_memory_ids: decision.cited_memory_ids,
            messages: bus.count_on(date),
        };
        Ok((record, state))
    }

    /// Mean-variance weights under the manager's direction boxes. With fewer
    /// than two common trailing returns the weights fall back to an equal
    /// split of unit exposure along each direction.
    fn portfolio_weights(
        &self,
        decision: &TradingDecision,
        trailing: &BTreeMap<String, Vec<f64>>,
    ) -> Result<BTreeMap<String, f64>, BacktestError> {
        let tickers = &self.config.run.tickers;
        let t = tickers.iter().map(|k| trailing[k].len()).min().unwrap_or(0);
        let directions: Vec<Direction> = tickers.iter().map(|k| decision.directions[k]).collect();
        if t < 2 {
            let n = tickers.len() as f64;
            return Ok(tickers
                .iter()
                .zip(&directions)
                .map(|(k, d)| (k.clone(), d.sign() / n))
                .collect());
        }
        let returns = DMatrix::from_fn(t, tickers.len(), |i, j| {
            let series = &trailing[&tickers[j]];
            series[series.len() - t + i]
        });
        let dates = self
            .market
            .calendar()
            .range(NaiveDate::MIN, decision.date)
            .into_iter()
            .rev()
            .take(t)
            .rev()
            .collect::<Vec<_>>();
        let dates = if dates.len() == t {
            dates
        } else {
            vec![decision.date; t]
        };
        let panel = ReturnPanel::new(tickers.clone(), dates, returns)?;
        let moments = shrink_estimates(&panel, self.config.portfolio.shrinkage)?;
        let w = solve_mean_variance(&MVInputs {
            mu: moments.mu,
            sigma: moments.sigma,
            directions,
        })?;
        Ok(tickers.iter().cloned().zip(w.w).collect())
    }
}

fn reflection_context(decision: &TradingDecision, pnl: f64, state: &RiskState) -> String {
    let directions = decision
        .directions
        .iter()
        .map(|(t, d)| format!("{t} {d}"))
        .collect::<Vec<_>>()
        .join(", ");
    let cvar = |c: Option<f64>| c.map_or_else(|| "n/a".to_string(), |c| format!("{c:+.6}"));
    format!(
        "Actions: {directions}. Realized PnL {pnl:+.6}. Episode CVaR {} (previous {}).\nYour reasoning was: {}",
        cvar(state.cvar),
        cvar(state.prev_cvar),
        decision.reasoning
    )
}

// ---------------------------------------------------------------------------
// Run directory

fn write_file(path: &Path, contents: &str) -> Result<(), BacktestError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BacktestError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_file(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, BacktestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| BacktestError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn write_audit(path: &Path, log: &[CallRecord]) -> Result<(), BacktestError> {
    let mut file = Vec::new();
    for rec in log {
        writeln!(file, "{}", serde_json::to_string(rec).expect("call record serializes"))
            .expect("write to vec");
    }
    write_file(path, &String::from_utf8(file).expect("utf-8 json"))
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_used(&self) -> PathBuf {
        self.root.join("config.used.json")
    }

    pub fn trajectory(&self, episode: Episode) -> PathBuf {
        self.root.join(format!("trajectory_{episode}.jsonl"))
    }

    pub fn failed_trajectory(&self, episode: Episode) -> PathBuf {
        self.root.join(format!("trajectory_{episode}.FAILED.jsonl"))
    }

    pub fn failed_marker(&self) -> PathBuf {
        self.root.join("FAILED")
    }

    pub fn beliefs(&self, k: u32) -> PathBuf {
        self.root.join("beliefs").join(format!("episode_{k}.json"))
    }

    pub fn episode_prompts(&self, k: u32) -> PathBuf {
        self.root.join("prompts").join(format!("episode_{k}.json"))
    }

    pub fn final_prompts(&self) -> PathBuf {
        self.root.join("prompts").join("final").join("prompts.json")
    }

    pub fn audit(&self, episode: Episode) -> PathBuf {
        self.root.join("audit").join(format!("episode_{episode}.jsonl"))
    }

    pub fn memory_snapshot(&self) -> PathBuf {
        self.root.join("memory").join("snapshot.jsonl")
    }

    pub fn checkpoint(&self, k: u32) -> PathBuf {
        self.root.join("checkpoints").join(format!("episode_{k}"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    /// The trajectory a report should describe: the test pass when present,
    /// otherwise the latest training episode.
    pub fn latest_trajectory(&self) -> Option<(Episode, PathBuf)> {
        let test = self.trajectory(Episode::Test);
        if test.is_file() {
            return Some((Episode::Test, test));
        }
        let mut best: Option<u32> = None;
        for entry in fs::read_dir(&self.root).ok()?.flatten() {
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(k) = name
                .strip_prefix("trajectory_")
                .and_then(|s| s.strip_suffix(".jsonl"))
                .and_then(|s| s.parse::<u32>().ok())
            {
                best = Some(best.map_or(k, |b| b.max(k)));
            }
        }
        best.map(|k| (Episode::Train(k), self.trajectory(Episode::Train(k))))
    }
}

/// Writes the prompt set and one plain-text file per agent.
fn write_final_prompts(dir: &RunDir, prompts: &PromptSet) -> Result<(), BacktestError> {
    write_json(&dir.final_prompts(), prompts)?;
    let base = dir.final_prompts();
    let folder = base.parent().expect("final prompts live in a folder");
    let manager = format!(
        "{}\n\nInvestment beliefs:\n{}\n",
        prompts.manager_prompt,
        crate::beliefs::render_belief_block(&prompts.belief_block)
    );
    write_file(&folder.join("manager.txt"), &manager)?;
    for (id, prompt) in &prompts.analyst_prompts {
        let belief = prompts
            .analyst_beliefs
            .get(id)
            .map(|b| format!("\n\nInvestment belief: {}", b.render()))
            .unwrap_or_default();
        write_file(&folder.join(format!("{id}.txt")), &format!("{prompt}{belief}\n"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: Episode,
    pub objective: f64,
    pub cumulative_return_pct: f64,
    /// Action overlap with the previous episode.
    pub overlap: Option<f64>,
    pub alerts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub episodes: Vec<EpisodeSummary>,
    pub belief_updates: usize,
    pub stopped_early: bool,
    pub final_metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub stage: String,
    pub metrics: MetricsReport,
    /// Cumulative return of each replication, in run order.
    pub replication_returns_pct: Vec<f64>,
    /// Index of the median-CR replication that the metrics describe.
    pub reported_replication: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub prompts: PromptSet,
    pub trajectories: Vec<Trajectory>,
    pub updates: Vec<BeliefUpdate>,
    pub stopped_early: bool,
    pub belief_update_calls: usize,
    pub belief_messages: usize,
}

fn checkpoint(dir: &RunDir, k: u32, prompts: &PromptSet, memory: &MemoryStore) -> Result<(), BacktestError> {
    let path = dir.checkpoint(k);
    fs::create_dir_all(&path).map_err(io_err(&path))?;
    write_json(&path.join("prompts.json"), prompts)?;
    memory.save_snapshot(&path.join("memory.jsonl"))?;
    Ok(())
}

fn record_failure(dir: &RunDir, failure: EpisodeFailure) -> BacktestError {
    let episode = failure.partial.episode;
    if let Err(e) = failure.partial.write(&dir.failed_trajectory(episode)) {
        log::error!("could not write partial trajectory: {e}");
    }
    if let Err(e) = fs::write(dir.failed_marker(), format!("{}\n", failure.error)) {
        log::error!("could not write FAILED marker: {e}");
    }
    failure.error
}

/// Training loop: episodes over the training range with an over-episode
/// belief update between consecutive episodes.
pub fn train(session: &Session, gateway: &LlmGateway, run_dir: &Path) -> Result<TrainOutcome, BacktestError> {
    let config = &session.config;
    let dir = RunDir::new(run_dir);
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    write_file(&dir.config_used(), &format!("{}\n", config.to_pretty_json()))?;
    let dates = session.train_dates()?;
    let discount = config.run.discount_alpha;
    let risk = config.risk_settings();

    let mut memory = session.new_memory();
    let mut prompts = PromptSet::initial(&config.agents.analysts);
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut updates: Vec<BeliefUpdate> = Vec::new();
    let mut start = 1;

    if config.run.resume {
        let mut last = 0;
        while dir.checkpoint(last + 1).join("prompts.json").is_file()
            && dir.trajectory(Episode::Train(last + 1)).is_file()
        {
            last += 1;
        }
        if last > 0 {
            log::info!("resuming after completed episode {last}");
            let cp = dir.checkpoint(last);
            prompts = read_json(&cp.join("prompts.json"))?;
            memory = MemoryStore::load_snapshot(
                &cp.join("memory.jsonl"),
                HASH_EMBEDDING_DIM,
                session.market.calendar().clone(),
            )?;
            for k in 1..=last {
                trajectories.push(Trajectory::read(&dir.trajectory(Episode::Train(k)), Episode::Train(k), discount)?);
                if k >= 2 {
                    updates.push(read_json(&dir.beliefs(k))?);
                }
            }
            start = last + 1;
            let _ = fs::remove_file(dir.failed_marker());
            let _ = fs::remove_file(dir.failed_trajectory(Episode::Train(start)));
        }
    }

    let engine = Engine::new(config, &session.market, gateway, &memory);
    let bus = MessageBus::new(Topology::new(engine.analyst_ids()));
    let mut belief_messages = 0;
    let mut stopped_early = false;
    let converged = |trajectories: &[Trajectory], updates: &[BeliefUpdate], k: u32| {
        let overlaps: Vec<f64> = updates.iter().map(|u| u.learning_rate).collect();
        let objectives: Vec<f64> = trajectories.iter().map(|t| t.objective).collect();
        convergence_check(&overlaps, &objectives, k, config.run.max_episodes, &risk)
    };

    let already_done = start > 1 && converged(&trajectories, &updates, start - 1);
    if !already_done {
        for k in start..=config.run.max_episodes {
            let episode = Episode::Train(k);
            write_json(&dir.episode_prompts(k), &prompts)?;
            let trajectory = engine
                .run_episode(&prompts, episode, &dates)
                .map_err(|f| record_failure(&dir, f))?;
            trajectory.write(&dir.trajectory(episode))?;
            log::info!(
                "episode {k}: objective {:+.6}, CR {:+.3}%",
                trajectory.objective,
                100.0 * trajectory.pnl().iter().sum::<f64>()
            );
            if let Some(prev) = trajectories.last() {
                let (update, next) = compare_and_update(
                    prev,
                    &trajectory,
                    &prompts,
                    &config.agents.analysts,
                    gateway,
                    &risk,
                )?;
                let date = trajectory.records.last().map(|r| r.date).unwrap_or(dates[0]);
                belief_messages += bus.propagate_beliefs(&update.target_agents, date)?;
                write_json(&dir.beliefs(k), &update)?;
                log::info!(
                    "belief update {}->{}: overlap {:.3}%, winner {}",
                    update.episode_pair.0,
                    update.episode_pair.1,
                    100.0 * update.learning_rate,
                    update.winner
                );
                prompts = next;
                updates.push(update);
            }
            write_audit(&dir.audit(episode), &gateway.take_log())?;
            trajectories.push(trajectory);
            checkpoint(&dir, k, &prompts, &memory)?;
            if converged(&trajectories, &updates, k) {
                stopped_early = k < config.run.max_episodes;
                break;
            }
        }
    }

    write_final_prompts(&dir, &prompts)?;
    fs::create_dir_all(dir.root.join("memory")).map_err(io_err(&dir.root))?;
    memory.save_snapshot(&dir.memory_snapshot())?;
    let last = trajectories.last().expect("at least one episode ran");
    let report = TrainReport {
        stage: "train".into(),
        episodes: trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| EpisodeSummary {
                episode: t.episode,
                objective: t.objective,
                cumulative_return_pct: 100.0 * t.pnl().iter().sum::<f64>(),
                overlap: i.checked_sub(1).map(|j| updates[j].learning_rate),
                alerts: t.records.iter().filter(|r| r.alert).count(),
            })
            .collect(),
        belief_updates: updates.len(),
        stopped_early,
        final_metrics: compute_metrics(last, config)?,
    };
    write_json(&dir.report(), &report)?;
    write_file(&dir.metrics_csv(), &metrics_csv(last, config.run.capital))?;

    Ok(TrainOutcome {
        prompts,
        trajectories,
        updates,
        stopped_early,
        belief_update_calls: gateway.calls_in_phase(Phase::BeliefUpdate),
        belief_messages,
    })
}

#[derive(Debug)]
pub struct TestOutcome {
    pub trajectory: Trajectory,
    pub report: TestReport,
    pub belief_update_calls: usize,
}

/// Test pass over the test range with inherited prompts, beliefs and memory.
/// The over-episode update never runs here. `make_gateway` is called once per
/// replication with a distinct seed.
pub fn test(
    session: &Session,
    run_dir: &Path,
    make_gateway: &dyn Fn(u64) -> Result<LlmGateway, BacktestError>,
) -> Result<TestOutcome, BacktestError> {
    let config = &session.config;
    let dir = RunDir::new(run_dir);
    let prompts_path = dir.final_prompts();
    let snapshot_path = dir.memory_snapshot();
    for p in [&prompts_path, &snapshot_path] {
        if !p.is_file() {
            return Err(BacktestError::MissingTrainingArtifacts(p.display().to_string()));
        }
    }
    let prompts: PromptSet = read_json(&prompts_path)?;
    let dates = session.test_dates()?;

    let mut runs = Vec::new();
    let mut belief_update_calls = 0;
    for i in 0..config.run.replications {
        let gateway = make_gateway(config.run.seed + u64::from(i))?;
        let memory = MemoryStore::load_snapshot(
            &snapshot_path,
            HASH_EMBEDDING_DIM,
            session.market.calendar().clone(),
        )?;
        let engine = Engine::new(config, &session.market, &gateway, &memory);
        let trajectory = engine
            .run_episode(&prompts, Episode::Test, &dates)
            .map_err(|f| record_failure(&dir, f))?;
        belief_update_calls += gateway.calls_in_phase(Phase::BeliefUpdate)
            + gateway.calls_in_phase(Phase::Conceptualize);
        let log = gateway.take_log();
        runs.push((trajectory, log));
    }

    let crs: Vec<f64> = runs
        .iter()
        .map(|(t, _)| 100.0 * t.pnl().iter().sum::<f64>())
        .collect();
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by(|a, b| crs[*a].total_cmp(&crs[*b]).then(a.cmp(b)));
    let median = order[(order.len() - 1) / 2];
    let (trajectory, log) = runs.swap_remove(median);

    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    trajectory.write(&dir.trajectory(Episode::Test))?;
    write_audit(&dir.audit(Episode::Test), &log)?;
    let report = TestReport {
        stage: "test".into(),
        metrics: compute_metrics(&trajectory, config)?,
        replication_returns_pct: crs,
        reported_replication: median,
    };
    write_json(&dir.report(), &report)?;
    write_file(&dir.metrics_csv(), &metrics_csv(&trajectory, config.run.capital))?;
    Ok(TestOutcome {
        trajectory,
        report,
        belief_update_calls,
    })
}

/// Recomputes `report.json` and `metrics.csv` from the persisted trajectory.
pub fn report(config: &RunConfig, run_dir: &Path) -> Result<MetricsReport, BacktestError> {
    let dir = RunDir::new(run_dir);
    let (episode, path) = dir
        .latest_trajectory()
        .ok_or_else(|| BacktestError::MissingTrajectory(run_dir.display().to_string()))?;
    let trajectory = Trajectory::read(&path, episode, config.run.discount_alpha)?;
    let metrics = compute_metrics(&trajectory, config)?;
    write_json(&dir.report(), &metrics)?;
    write_file(&dir.metrics_csv(), &metrics_csv(&trajectory, config.run.capital))?;
    Ok(metrics)
}

/// Candidate pool for stock selection: every ticker with a configured price
/// file, its news count, and its daily log returns over the training range.
pub fn stock_candidates(config: &RunConfig) -> Result<Vec<StockCandidate>, BacktestError> {
    let mut news: BTreeMap<String, usize> = BTreeMap::new();
    for path in &config.data.documents {
        for doc in load_documents(path)? {
            if doc.kind == DocKind::News {
                *news.entry(doc.ticker).or_insert(0) += 1;
            }
        }
    }
    let mut out = Vec::new();
    for (ticker, path) in &config.data.prices {
        let series = load_price_series(path, ticker)?;
        let in_range: Vec<f64> = series
            .bars
            .iter()
            .filter(|b| {
                config.run.train_start.is_none_or(|s| b.date >= s)
                    && config.run.train_end.is_none_or(|e| b.date <= e)
            })
            .map(|b| b.close)
            .collect();
        let returns = in_range
            .windows(2)
            .map(|w| log_return(w[0], w[1]))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(StockCandidate {
            ticker: ticker.clone(),
            news_count: news.get(ticker).copied().unwrap_or(0),
            returns,
        });
    }
    Ok(out)
}

/// Daily log returns of one price series over `dates` (for buy-and-hold comparisons).
pub fn buy_and_hold_pnl(market: &MarketData, ticker: &str, dates: &[NaiveDate]) -> Result<Vec<f64>, BacktestError> {
    dates
        .windows(2)
        .map(|w| {
            let a = market.close_on(ticker, w[0])?;
            let b = market.close_on(ticker, w[1])?;
            Ok(log_return(a, b)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnl_examples() {
        assert_eq!(daily_pnl(0.0, 100.0, 110.0).unwrap(), 0.0);
        assert!((daily_pnl(1.0, 100.0, 110.0).unwrap() - 0.0953102).abs() < 1e-7);
        assert!((daily_pnl(-1.0, 100.0, 90.0).unwrap() - 0.1053605).abs() < 1e-7);
        assert!(matches!(daily_pnl(1.0, 0.0, 1.0), Err(BacktestError::NonPositivePrice(_))));
    }

    #[test]
    fn cumulative_return_examples() {
        let r = [
            daily_pnl(1.0, 100.0, 110.0).unwrap(),
            daily_pnl(-1.0, 110.0, 99.0).unwrap(),
        ];
        assert!((cumulative_return(&r).unwrap() - 20.067).abs() < 1e-3);
        assert_eq!(cumulative_return(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(cumulative_return(&[]), Err(BacktestError::EmptyTrajectory)));
    }

    #[test]
    fn sharpe_examples() {
        let sr = sharpe_ratio(&[0.01, -0.01, 0.03, 0.01], 0.0, false).unwrap();
        assert!((sr - 0.6124).abs() < 1e-4);
        assert!(matches!(sharpe_ratio(&[0.02; 5], 0.0, false), Err(BacktestError::ZeroVolatility)));
        assert_eq!(sharpe_ratio(&[0.01, 0.03], 0.02, false).unwrap(), 0.0);
        let ann = sharpe_ratio(&[0.01, -0.01, 0.03, 0.01], 0.0, true).unwrap();
        assert!((ann - sr * 252f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn drawdown_examples() {
        assert_eq!(max_drawdown(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(max_drawdown(&[100.0, 120.0, 90.0, 130.0]).unwrap(), 25.0);
        assert_eq!(max_drawdown(&[100.0, 50.0]).unwrap(), 50.0);
        assert!(matches!(max_drawdown(&[]), Err(BacktestError::EmptySeries)));
        assert!(matches!(max_drawdown(&[1.0, 0.0]), Err(BacktestError::NonPositiveValue(_))));
    }

    #[test]
    fn objective_examples() {
        assert_eq!(objective_value(&[1.0, 2.0, 3.0], 1.0), 6.0);
        assert_eq!(objective_value(&[1.0, 2.0, 3.0], 0.5), 2.75);
        assert_eq!(objective_value(&[], 0.9), 0.0);
    }

    #[test]
    fn wilcoxon_all_positive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.0; 6];
        let w = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(w.w_minus, 0.0);
        assert_eq!(w.statistic, 0.0);
        assert!((w.p_value - 0.03125).abs() < 1e-15);
        assert!(w.exact);
        let swapped = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(swapped.w_plus, w.w_minus);
        assert_eq!(swapped.p_value, w.p_value);
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(BacktestError::TooFewPairs(0))));
    }

    #[test]
    fn wilcoxon_large_sample_uses_normal() {
        let a: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.11).cos() * 0.5).collect();
        let w = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!w.exact);
        assert!(w.p_value > 0.0 && w.p_value <= 1.0);
        assert_eq!(w.w_plus + w.w_minus, 40.0 * 41.0 / 2.0);
    }

    #[test]
    fn equity_and_csv() {
        let eq = equity_curve(&[0.1, -0.1], 100.0);
        assert_eq!(eq[0], 100.0);
        assert!((eq[2] - 100.0).abs() < 1e-12);
    }
}
