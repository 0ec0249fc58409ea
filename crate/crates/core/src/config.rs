//! Run configuration: one JSON document with a section per module.
//!
//! Every tunable default lives here under a named key, so a saved
//! `config.used.json` fully describes a run. Relative paths are resolved
//! against the directory holding the config file. Dotted overrides such as
//! `run.max_episodes=2` are applied to the raw JSON before deserialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agents::{AgentRole, AgentSettings, TradingMode};
use crate::data_ingest::DEFAULT_MOMENTUM_WINDOW;
use crate::memory::{DecayConfig, DEFAULT_INITIAL_IMPORTANCE, DEFAULT_TOP_K};
use crate::portfolio::{ShareRounding, DEFAULT_MIN_NEWS, DEFAULT_SHRINKAGE};
use crate::risk_control::RiskSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("config {path} does not parse: {detail}")]
    Parse { path: String, detail: String },
    #[error("bad override `{0}`: expected key=value with a dotted key")]
    InvalidOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: RunMode,
    pub trading_mode: TradingMode,
    pub tickers: Vec<String>,
    pub train_start: Option<NaiveDate>,
    pub train_end: Option<NaiveDate>,
    pub test_start: Option<NaiveDate>,
    pub test_end: Option<NaiveDate>,
    /// Discount factor of the episode objective, in (0, 1].
    pub discount_alpha: f64,
    pub max_episodes: u32,
    pub capital: f64,
    pub risk_free_daily: f64,
    /// Multiply the Sharpe ratio by sqrt(252).
    pub annualize_sharpe: bool,
    pub replications: u32,
    pub seed: u64,
    /// Resume training from the last completed episode in the run directory.
    pub resume: bool,
    pub general_config: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: RunMode::Train,
            trading_mode: TradingMode::SingleStock,
            tickers: Vec::new(),
            train_start: None,
            train_end: None,
            test_start: None,
            test_end: None,
            discount_alpha: 1.0,
            max_episodes: 4,
            capital: 100_000.0,
            risk_free_daily: 0.0,
            annualize_sharpe: false,
            replications: 1,
            seed: 0,
            resume: false,
            general_config: "You trade US equities from daily data. Decisions are made after \
                the close and held until the next close."
                .to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Ticker -> price CSV.
    pub prices: BTreeMap<String, PathBuf>,
    /// JSONL document corpora.
    pub documents: Vec<PathBuf>,
    pub momentum_window: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            prices: BTreeMap::new(),
            documents: Vec::new(),
            momentum_window: DEFAULT_MOMENTUM_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub top_k: usize,
    pub default_importance: f64,
    pub decay: DecayConfig,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            default_importance: DEFAULT_INITIAL_IMPORTANCE,
            decay: DecayConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    /// Chat-completions endpoint. Falls back to the environment when absent.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: u64,
    pub min_interval_ms: u64,
    pub trading_temperature: f64,
    pub belief_temperature: f64,
    pub max_retries: u32,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: None,
            timeout_secs: 120,
            min_interval_ms: 0,
            trading_temperature: crate::llm_gateway::TRADING_TEMPERATURE,
            belief_temperature: crate::llm_gateway::BELIEF_TEMPERATURE,
            max_retries: crate::llm_gateway::DEFAULT_MAX_RETRIES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentsSection {
    pub analysts: Vec<AgentRole>,
    pub position_size: f64,
    pub feedback_sigma_multiple: f64,
    pub feedback_window: usize,
    pub selection_cvar_alpha: f64,
    /// Run the analysts of one day on separate threads.
    pub parallel: bool,
}

impl Default for AgentsSection {
    fn default() -> Self {
        let d = AgentSettings::default();
        Self {
            analysts: vec![
                AgentRole::NewsAnalyst,
                AgentRole::Filing10kAnalyst,
                AgentRole::Filing10qAnalyst,
                AgentRole::EccAnalyst,
                AgentRole::DataAnalyst,
            ],
            position_size: d.position_size,
            feedback_sigma_multiple: d.feedback_sigma_multiple,
            feedback_window: d.feedback_window,
            selection_cvar_alpha: d.selection_cvar_alpha,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskSection {
    pub cvar_alpha: f64,
    pub min_history: usize,
    pub min_run_length: usize,
    pub convergence_overlap: f64,
    pub convergence_epsilon: f64,
}

impl Default for RiskSection {
    fn default() -> Self {
        let d = RiskSettings::default();
        Self {
            cvar_alpha: d.cvar_alpha,
            min_history: d.min_history,
            min_run_length: d.min_run_length,
            convergence_overlap: d.convergence_overlap,
            convergence_epsilon: d.convergence_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortfolioSection {
    pub shrinkage: f64,
    pub rounding: ShareRounding,
    /// Trailing daily returns used to estimate mean and covariance.
    pub estimation_window: usize,
    pub select_n: usize,
    pub min_news: usize,
}

impl Default for PortfolioSection {
    fn default() -> Self {
        Self {
            shrinkage: DEFAULT_SHRINKAGE,
            rounding: ShareRounding::Fractional,
            estimation_window: 60,
            select_n: 3,
            min_news: DEFAULT_MIN_NEWS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub memory: MemorySection,
    pub llm: LlmSection,
    pub agents: AgentsSection,
    pub risk: RiskSection,
    pub portfolio: PortfolioSection,
}

/// Sets `key` (dotted path) in `root`. The value is parsed as JSON when it
/// parses, otherwise taken as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::InvalidOverride(spec.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::InvalidOverride(spec.to_string()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(ConfigError::InvalidOverride(spec.to_string()));
        }
        node = node
            .as_object_mut()
            .expect("checked object")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| ConfigError::InvalidOverride(spec.to_string()))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Reads, overrides, resolves paths and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_json_str(&text, base, overrides).map_err(|e| match e {
            ConfigError::Parse { detail, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                detail,
            },
            other => other,
        })
    }

    pub fn from_json_str(text: &str, base: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let parse_err = |e: serde_json::Error| ConfigError::Parse {
            path: "<inline>".into(),
            detail: e.to_string(),
        };
        let mut raw: Value = serde_json::from_str(text).map_err(parse_err)?;
        for o in overrides {
            apply_override(&mut raw, o)?;
        }
        let mut config: RunConfig = serde_json::from_value(raw).map_err(parse_err)?;
        for p in config.data.prices.values_mut() {
            *p = resolve(base, p);
        }
        for p in &mut config.data.documents {
            *p = resolve(base, p);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let run = &self.run;
        if run.tickers.is_empty() {
            return bad("run.tickers is empty".into());
        }
        if run.trading_mode == TradingMode::SingleStock && run.tickers.len() != 1 {
            return bad(format!(
                "single_stock mode trades exactly one ticker, got {}",
                run.tickers.len()
            ));
        }
        if run.tickers.iter().collect::<BTreeSet<_>>().len() != run.tickers.len() {
            return bad("run.tickers has duplicates".into());
        }
        for t in &run.tickers {
            if !self.data.prices.contains_key(t) {
                return bad(format!("no price file configured for {t} (data.prices)"));
            }
        }
        if !(run.discount_alpha > 0.0 && run.discount_alpha <= 1.0) {
            return bad(format!("run.discount_alpha {} must lie in (0, 1]", run.discount_alpha));
        }
        if run.max_episodes == 0 {
            return bad("run.max_episodes must be at least 1".into());
        }
        if run.replications == 0 {
            return bad("run.replications must be at least 1".into());
        }
        if !(run.capital > 0.0) {
            return bad(format!("run.capital {} must be positive", run.capital));
        }
        for (name, start, end) in [
            ("train", run.train_start, run.train_end),
            ("test", run.test_start, run.test_end),
        ] {
            if let (Some(s), Some(e)) = (start, end) {
                if s >= e {
                    return bad(format!("{name} range {s}..{e} is empty"));
                }
            }
        }
        if let (Some(train_end), Some(test_start)) = (run.train_end, run.test_start) {
            if train_end >= test_start {
                return bad(format!(
                    "train range must precede test range (train_end {train_end} >= test_start {test_start})"
                ));
            }
        }
        for (key, a) in [
            ("risk.cvar_alpha", self.risk.cvar_alpha),
            ("agents.selection_cvar_alpha", self.agents.selection_cvar_alpha),
        ] {
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("{key} {a} must lie in (0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.portfolio.shrinkage) {
            return bad(format!("portfolio.shrinkage {} outside [0, 1]", self.portfolio.shrinkage));
        }
        if self.memory.top_k == 0 {
            return bad("memory.top_k must be at least 1".into());
        }
        let decay = &self.memory.decay;
        for r in [
            decay.news,
            decay.ecc_transcript,
            decay.form10q,
            decay.form10k,
            decay.analyst_report,
            decay.other,
        ] {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("memory.decay ratio {r} must lie in (0, 1]"));
            }
        }
        let mut seen = BTreeSet::new();
        for role in &self.agents.analysts {
            if !role.is_analyst() {
                return bad("agents.analysts may not list the manager".into());
            }
            if !seen.insert(role) {
                return bad(format!("agents.analysts lists {} twice", role.agent_id()));
            }
        }
        Ok(())
    }

    pub fn agent_settings(&self) -> AgentSettings {
        AgentSettings {
            top_k: self.memory.top_k,
            temperature: self.llm.trading_temperature,
            max_retries: self.llm.max_retries,
            default_importance: self.memory.default_importance,
            decay: self.memory.decay.clone(),
            position_size: self.agents.position_size,
            feedback_sigma_multiple: self.agents.feedback_sigma_multiple,
            feedback_window: self.agents.feedback_window,
            selection_cvar_alpha: self.agents.selection_cvar_alpha,
        }
    }

    pub fn risk_settings(&self) -> RiskSettings {
        RiskSettings {
            cvar_alpha: self.risk.cvar_alpha,
            min_history: self.risk.min_history,
            min_run_length: self.risk.min_run_length,
            convergence_overlap: self.risk.convergence_overlap,
            convergence_epsilon: self.risk.convergence_epsilon,
            belief_temperature: self.llm.belief_temperature,
            max_retries: self.llm.max_retries,
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
