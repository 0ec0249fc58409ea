//! Two levels of risk control.
//!
//! Within an episode, a [`RiskMonitor`] tracks the empirical CVaR of the
//! episode's daily PnL and raises an alert when it drops or the day lost
//! money. Between training episodes, [`compare_and_update`] conceptualizes the
//! sustained winning and losing runs of two consecutive trajectories, asks for
//! an optimization direction (the meta prompt), and rewrites the belief block
//! with an edit aggressiveness set by the action overlap of the two episodes.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentRole, PromptSet};
use crate::backtest::{DayRecord, Trajectory};
use crate::beliefs::{render_belief_block, Aspect, AspectText, BeliefBlock};
use crate::llm_gateway::{
    aspect_entries, CompletionRequest, GatewayError, LlmGateway, OutputSchema, Phase, StepKey,
};
use crate::{AgentId, Direction, Episode};

pub const DEFAULT_CVAR_ALPHA: f64 = 0.01;
pub const DEFAULT_MIN_HISTORY: usize = 10;
pub const DEFAULT_MIN_RUN_LENGTH: usize = 2;
pub const CONVERGENCE_OVERLAP: f64 = 0.8;
pub const RISK_CONTROL_ROLE: &str = "risk_control";

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("PnL history is empty")]
    EmptyHistory,
    #[error("alpha {0} must lie in (0, 1)")]
    AlphaOutOfRange(f64),
    #[error("action sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("action sequences are empty")]
    EmptySequence,
    #[error("episode {0} is incomplete")]
    IncompleteEpisode(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn check_alpha(alpha: f64) -> Result<(), RiskError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(RiskError::AlphaOutOfRange(alpha))
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Index of the lower empirical alpha-quantile in a sorted sample: the first
/// `i` (0-based) with `(i + 1) / n >= alpha`.
fn var_index(n: usize, alpha: f64) -> usize {
    let mut i = ((alpha * n as f64).ceil() as usize).max(1) - 1;
    // Guard against rounding in alpha * n.
    while i > 0 && (i as f64) / (n as f64) >= alpha {
        i -= 1;
    }
    while ((i + 1) as f64) / (n as f64) < alpha {
        i += 1;
    }
    i.min(n - 1)
}

/// Empirical value at risk: the smallest sample value whose empirical CDF
/// reaches `alpha`.
pub fn var(values: &[f64], alpha: f64) -> Result<f64, RiskError> {
    check_alpha(alpha)?;
    if values.is_empty() {
        return Err(RiskError::EmptyHistory);
    }
    let s = sorted(values);
    Ok(s[var_index(s.len(), alpha)])
}

/// Empirical conditional value at risk: the mean of all values at or below
/// the VaR.
pub fn cvar(values: &[f64], alpha: f64) -> Result<f64, RiskError> {
    check_alpha(alpha)?;
    if values.is_empty() {
        return Err(RiskError::EmptyHistory);
    }
    let s = sorted(values);
    let threshold = s[var_index(s.len(), alpha)];
    // Averaging offsets from the threshold keeps a constant tail exact.
    let tail: Vec<f64> = s.iter().map(|x| x - threshold).take_while(|d| *d <= 0.0).collect();
    Ok(threshold + tail.iter().sum::<f64>() / tail.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionTrigger {
    CvarDrop,
    NegativePnl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskState {
    pub date: NaiveDate,
    pub cvar: Option<f64>,
    pub prev_cvar: Option<f64>,
    pub alert: bool,
    pub history_len: usize,
    pub trigger: Option<ReflectionTrigger>,
}

/// Applies the alert rule to a state whose CVaR fields are already current.
/// The CVaR branch only counts once `history_len >= min_history`.
pub fn within_episode_check(state: &RiskState, r_t: f64, min_history: usize) -> RiskState {
    let cvar_drop = state.history_len >= min_history
        && matches!((state.cvar, state.prev_cvar), (Some(now), Some(prev)) if now < prev);
    let loss = r_t < 0.0;
    let trigger = if cvar_drop {
        Some(ReflectionTrigger::CvarDrop)
    } else if loss {
        Some(ReflectionTrigger::NegativePnl)
    } else {
        None
    };
    RiskState {
        alert: cvar_drop || loss,
        trigger,
        ..state.clone()
    }
}

/// Per-episode CVaR tracker. Create a fresh one for every episode.
#[derive(Debug, Clone)]
pub struct RiskMonitor {
    alpha: f64,
    min_history: usize,
    history: Vec<f64>,
    last_cvar: Option<f64>,
}

impl RiskMonitor {
    pub fn new(alpha: f64, min_history: usize) -> Result<Self, RiskError> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            min_history,
            history: Vec::new(),
            last_cvar: None,
        })
    }

    /// Records the PnL realized at `date`, recomputes CVaR and evaluates the trigger.
    pub fn observe(&mut self, date: NaiveDate, r_t: f64) -> RiskState {
        self.history.push(r_t);
        let now = cvar(&self.history, self.alpha).ok();
        let state = RiskState {
            date,
            cvar: now,
            prev_cvar: self.last_cvar,
            alert: false,
            history_len: self.history.len(),
            trigger: None,
        };
        self.last_cvar = now;
        within_episode_check(&state, r_t, self.min_history)
    }

    pub fn current_cvar(&self) -> Option<f64> {
        self.last_cvar
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }
}

/// Fraction of positions with the same label.
pub fn overlap_percentage<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, RiskError> {
    if a.len() != b.len() {
        return Err(RiskError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(RiskError::EmptySequence);
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Flattens a trajectory into its `(date, ticker)` direction labels.
pub fn action_sequence(trajectory: &Trajectory) -> Vec<Direction> {
    trajectory
        .records
        .iter()
        .flat_map(|r| r.directions.values().copied())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Profitable,
    Losing,
}

/// Half-open index range `[start, end)` of a maximal same-sign PnL run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PnlRun {
    pub start: usize,
    pub end: usize,
    pub kind: RunKind,
}

impl PnlRun {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Maximal runs of strictly positive or strictly negative PnL of at least `min_len` days.
pub fn sustained_runs(pnl: &[f64], min_len: usize) -> Vec<PnlRun> {
    let kind_of = |x: f64| {
        if x > 0.0 {
            Some(RunKind::Profitable)
        } else if x < 0.0 {
            Some(RunKind::Losing)
        } else {
            None
        }
    };
    let mut runs = Vec::new();
    let mut i = 0;
    while i < pnl.len() {
        let Some(kind) = kind_of(pnl[i]) else {
            i += 1;
            continue;
        };
        let start = i;
        while i < pnl.len() && kind_of(pnl[i]) == Some(kind) {
            i += 1;
        }
        if i - start >= min_len.max(1) {
            runs.push(PnlRun { start, end: i, kind });
        }
    }
    runs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptInsight {
    pub aspect: Aspect,
    pub text: AspectText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeInsights {
    pub episode: Episode,
    pub objective: f64,
    pub insights: Vec<ConceptInsight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefUpdate {
    pub episode_pair: (u32, u32),
    pub winner: u32,
    pub insights: Vec<EpisodeInsights>,
    pub meta_prompt: BTreeMap<Aspect, String>,
    #[serde(default)]
    pub meta_reasoning: String,
    pub learning_rate: f64,
    pub instruction: String,
    pub target_agents: Vec<AgentId>,
    /// Belief block after the rewrite.
    pub beliefs: BeliefBlock,
}

impl BeliefUpdate {
    /// Aspects that received any conceptualized insight in either episode.
    pub fn insight_aspects(&self) -> BTreeSet<Aspect> {
        self.insights
            .iter()
            .flat_map(|e| e.insights.iter().map(|c| c.aspect))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskSettings {
    pub cvar_alpha: f64,
    pub min_history: usize,
    pub min_run_length: usize,
    pub convergence_overlap: f64,
    pub convergence_epsilon: f64,
    pub belief_temperature: f64,
    pub max_retries: u32,
}

impl Default for RiskSettings {
    fn default() -> Self {
        Self {
            cvar_alpha: DEFAULT_CVAR_ALPHA,
            min_history: DEFAULT_MIN_HISTORY,
            min_run_length: DEFAULT_MIN_RUN_LENGTH,
            convergence_overlap: CONVERGENCE_OVERLAP,
            convergence_epsilon: 1e-4,
            belief_temperature: crate::llm_gateway::BELIEF_TEMPERATURE,
            max_retries: crate::llm_gateway::DEFAULT_MAX_RETRIES,
        }
    }
}

pub fn learning_rate_instruction(tau: f64) -> &'static str {
    if tau < 0.5 {
        "substantially rewrite the belief aspects"
    } else if tau < 0.8 {
        "revise targeted aspects"
    } else {
        "make minimal refinements only"
    }
}

fn render_record(r: &DayRecord) -> String {
    let directions = r
        .directions
        .iter()
        .map(|(t, d)| format!("{t} {d}"))
        .collect::<Vec<_>>()
        .join(", ");
    let mut out = format!(
        "Date {} | PnL {:+.6} | actions: {directions}\n  reasoning: {}\n",
        r.date, r.pnl, r.reasoning
    );
    for m in &r.insights {
        out.push_str(&format!("  {} on {}: {}\n", m.from, m.ticker, m.distilled_insight));
    }
    out
}

fn last_date(trajectory: &Trajectory) -> Result<NaiveDate, RiskError> {
    trajectory
        .records
        .last()
        .map(|r| r.date)
        .ok_or_else(|| RiskError::IncompleteEpisode(trajectory.episode.to_string()))
}

/// Summarizes the sustained winning and losing runs of `trajectory` into
/// per-aspect insights. No qualifying run means no call and no insights.
pub fn conceptualize(
    trajectory: &Trajectory,
    gateway: &LlmGateway,
    settings: &RiskSettings,
) -> Result<Vec<ConceptInsight>, RiskError> {
    let pnl: Vec<f64> = trajectory.records.iter().map(|r| r.pnl).collect();
    let runs = sustained_runs(&pnl, settings.min_run_length);
    if runs.is_empty() {
        return Ok(Vec::new());
    }
    let mut body = String::new();
    for run in &runs {
        let label = match run.kind {
            RunKind::Profitable => "Sustained profitable run",
            RunKind::Losing => "Sustained losing run",
        };
        body.push_str(&format!("\n{label} ({} days):\n", run.len()));
        for r in &trajectory.records[run.start..run.end] {
            body.push_str(&render_record(r));
        }
    }
    let schema = OutputSchema::Conceptualization;
    let request = CompletionRequest {
        role_tag: RISK_CONTROL_ROLE.to_string(),
        step_key: StepKey::new(
            trajectory.episode.to_string(),
            last_date(trajectory)?,
            Phase::Conceptualize,
        ),
        system_prompt: "You review trading trajectories and summarize what drove sustained \
            gains and losses, grouped by information aspect."
            .to_string(),
        user_prompt: format!("{body}\n{}", schema.instructions()),
        output_schema: schema,
        temperature: settings.belief_temperature,
        max_retries: settings.max_retries,
    };
    let out = gateway.complete(&request)?;
    Ok(aspect_entries(&out.fields["insights"])
        .into_iter()
        .map(|(aspect, text)| ConceptInsight { aspect, text })
        .collect())
}

fn render_insights(insights: &[ConceptInsight]) -> String {
    if insights.is_empty() {
        return "  (no sustained runs)".to_string();
    }
    insights
        .iter()
        .map(|c| format!("  {}: {}", c.aspect, c.text.render()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One over-episode update between consecutive training episodes.
pub fn compare_and_update(
    prev: &Trajectory,
    cur: &Trajectory,
    prompts: &PromptSet,
    analysts: &[AgentRole],
    gateway: &LlmGateway,
    settings: &RiskSettings,
) -> Result<(BeliefUpdate, PromptSet), RiskError> {
    let (Some(k_prev), Some(k_cur)) = (prev.episode.train_index(), cur.episode.train_index()) else {
        return Err(RiskError::IncompleteEpisode(format!(
            "{} / {}",
            prev.episode, cur.episode
        )));
    };
    let date = last_date(cur)?;
    last_date(prev)?;
    let winner = if prev.objective > cur.objective { k_prev } else { k_cur };
    let tau = overlap_percentage(&action_sequence(prev), &action_sequence(cur))?;

    let prev_insights = conceptualize(prev, gateway, settings)?;
    let cur_insights = conceptualize(cur, gateway, settings)?;
    let (better, worse) = if winner == k_cur {
        (&cur_insights, &prev_insights)
    } else {
        (&prev_insights, &cur_insights)
    };

    let step_key = StepKey::new(k_cur.to_string(), date, Phase::BeliefUpdate);
    let schema = OutputSchema::MetaPrompt;
    let meta_request = CompletionRequest {
        role_tag: RISK_CONTROL_ROLE.to_string(),
        step_key: step_key.clone(),
        system_prompt: "You compare two trading episodes and state, per information aspect, \
            how the investment beliefs should change."
            .to_string(),
        user_prompt: format!(
            "Episode {winner} achieved the higher objective ({:+.6} vs {:+.6}).\n\
             Insights from the better episode:\n{}\nInsights from the worse episode:\n{}\n\
             Current beliefs:\n{}\n\n{}",
            prev.objective.max(cur.objective),
            prev.objective.min(cur.objective),
            render_insights(better),
            render_insights(worse),
            render_belief_block(&prompts.belief_block),
            schema.instructions()
        ),
        output_schema: schema,
        temperature: settings.belief_temperature,
        max_retries: settings.max_retries,
    };
    let meta = gateway.complete(&meta_request)?;
    let meta_prompt: BTreeMap<Aspect, String> = aspect_entries(&meta.fields["meta_prompt"])
        .into_iter()
        .map(|(a, t)| (a, t.render()))
        .collect();
    let meta_reasoning = meta.fields["reasoning"].as_str().unwrap_or_default().to_string();

    let instruction = learning_rate_instruction(tau);
    let schema = OutputSchema::BeliefRewrite;
    let direction = meta_prompt
        .iter()
        .map(|(a, t)| format!("  {a}: {t}"))
        .collect::<Vec<_>>()
        .join("\n");
    let rewrite_request = CompletionRequest {
        role_tag: AgentRole::Manager.agent_id().to_string(),
        step_key,
        system_prompt: AgentRole::Manager.default_profile().to_string(),
        user_prompt: format!(
            "Update your investment beliefs.\nOptimization direction:\n{direction}\n\
             Action overlap with the previous episode: {:.3}%. Learning rate: {instruction}.\n\
             Current beliefs:\n{}\n\n{}",
            tau * 100.0,
            render_belief_block(&prompts.belief_block),
            schema.instructions()
        ),
        output_schema: schema,
        temperature: settings.belief_temperature,
        max_retries: settings.max_retries,
    };
    let rewrite = gateway.complete(&rewrite_request)?;

    let mut next = prompts.clone();
    for (aspect, text) in aspect_entries(&rewrite.fields["beliefs"]) {
        next.belief_block.insert(aspect, text);
    }
    let mut target_agents = vec![AgentRole::Manager.agent_id()];
    for role in analysts {
        if let Some(aspect) = role.aspect() {
            if meta_prompt.contains_key(&aspect) {
                if let Some(text) = next.belief_block.get(&aspect) {
                    next.analyst_beliefs.insert(role.agent_id(), text.clone());
                }
                target_agents.push(role.agent_id());
            }
        }
    }

    let update = BeliefUpdate {
        episode_pair: (k_prev, k_cur),
        winner,
        insights: vec![
            EpisodeInsights {
                episode: prev.episode,
                objective: prev.objective,
                insights: prev_insights,
            },
            EpisodeInsights {
                episode: cur.episode,
                objective: cur.objective,
                insights: cur_insights,
            },
        ],
        meta_prompt,
        meta_reasoning,
        learning_rate: tau,
        instruction: instruction.to_string(),
        target_agents,
        beliefs: next.belief_block.clone(),
    };
    Ok((update, next))
}

/// Whether training should stop after the latest episode. `overlaps[i]` and
/// `objectives[i]` describe episode `i + 2` and `i + 1` respectively.
pub fn convergence_check(
    overlaps: &[f64],
    objectives: &[f64],
    episodes_done: u32,
    max_episodes: u32,
    settings: &RiskSettings,
) -> bool {
    if episodes_done >= max_episodes {
        return true;
    }
    let (Some(&tau), [.., before, last]) = (overlaps.last(), objectives) else {
        return false;
    };
    tau >= settings.convergence_overlap && last - before < settings.convergence_epsilon
}
