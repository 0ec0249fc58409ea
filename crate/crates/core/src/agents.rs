//! The manager-analyst hierarchy.
//!
//! Analysts each own one modality (a document kind or the price stream) and
//! turn it into one [`InsightMessage`] per ticker and day. The manager is the
//! only decision maker. Messages travel only along the edges of a two-level
//! tree: analysts and risk control talk to the manager, never to each other.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beliefs::{render_belief_block, Aspect, AspectText, BeliefBlock};
use crate::data_ingest::{DocKind, Indicators, Observation, PriceBar, TextDocument};
use crate::llm_gateway::{
    CompletionRequest, GatewayError, LlmGateway, OutputSchema, Phase, StepKey,
};
use crate::memory::{DecayConfig, Embedder, MemoryError, MemoryEvent, MemoryLayer, MemoryQuery, MemoryStore};
use crate::risk_control::{cvar, ReflectionTrigger};
use crate::{AgentId, Direction, Episode};

pub const RISK_AVERSE_CLAUSE: &str = "RISK ALERT: the within-episode risk monitor has fired. \
Adopt a risk-averse attitude for today's trading actions regardless of the prior risk status: \
prefer reducing exposure and only take a position when the evidence is strong.";

pub const NO_SIGNAL: &str = "no signal";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("missing report from `{analyst}` for {ticker}")]
    MissingAnalystReport { analyst: AgentId, ticker: String },
    #[error("illegal route {from} -> {to}")]
    IllegalRoute { from: String, to: String },
    #[error("`{0}` is not an analyst role")]
    NotAnAnalyst(AgentId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Manager,
    NewsAnalyst,
    #[serde(rename = "filing10k_analyst")]
    Filing10kAnalyst,
    #[serde(rename = "filing10q_analyst")]
    Filing10qAnalyst,
    EccAnalyst,
    DataAnalyst,
    SelectionAnalyst,
}

impl AgentRole {
    pub const ANALYSTS: [AgentRole; 6] = [
        AgentRole::NewsAnalyst,
        AgentRole::Filing10kAnalyst,
        AgentRole::Filing10qAnalyst,
        AgentRole::EccAnalyst,
        AgentRole::DataAnalyst,
        AgentRole::SelectionAnalyst,
    ];

    pub fn agent_id(self) -> AgentId {
        AgentId::from(match self {
            AgentRole::Manager => "manager",
            AgentRole::NewsAnalyst => "news_analyst",
            AgentRole::Filing10kAnalyst => "filing10k_analyst",
            AgentRole::Filing10qAnalyst => "filing10q_analyst",
            AgentRole::EccAnalyst => "ecc_analyst",
            AgentRole::DataAnalyst => "data_analyst",
            AgentRole::SelectionAnalyst => "selection_analyst",
        })
    }

    pub fn from_agent_id(id: &AgentId) -> Option<Self> {
        std::iter::once(AgentRole::Manager)
            .chain(Self::ANALYSTS)
            .find(|r| &r.agent_id() == id)
    }

    pub fn is_analyst(self) -> bool {
        self != AgentRole::Manager
    }

    /// Document kind consumed by text analysts; `None` for price-stream roles.
    pub fn doc_kind(self) -> Option<DocKind> {
        match self {
            AgentRole::NewsAnalyst => Some(DocKind::News),
            AgentRole::Filing10kAnalyst => Some(DocKind::Form10k),
            AgentRole::Filing10qAnalyst => Some(DocKind::Form10q),
            AgentRole::EccAnalyst => Some(DocKind::EccTranscript),
            _ => None,
        }
    }

    /// Belief aspect this analyst is responsible for.
    pub fn aspect(self) -> Option<Aspect> {
        match self {
            AgentRole::NewsAnalyst => Some(Aspect::NewsInsights),
            AgentRole::Filing10kAnalyst => Some(Aspect::Form10k),
            AgentRole::Filing10qAnalyst => Some(Aspect::Form10q),
            AgentRole::EccAnalyst => Some(Aspect::Ecc),
            AgentRole::DataAnalyst => Some(Aspect::HistoricalMomentum),
            AgentRole::Manager | AgentRole::SelectionAnalyst => None,
        }
    }

    pub fn default_profile(self) -> &'static str {
        match self {
            AgentRole::Manager => "Role assignment: You are an experienced trading manager. \
                Duty: consolidate the investment insights of your analysts, weigh them against \
                your investment beliefs and risk status, and make the final trading decision.",
            AgentRole::NewsAnalyst => "Role assignment: You are a financial news analyst. \
                Duty: distill the investment insight and sentiment of today's news.",
            AgentRole::Filing10kAnalyst => "Role assignment: You are an annual-report analyst. \
                Duty: distill long-horizon insights from Form 10-K filings.",
            AgentRole::Filing10qAnalyst => "Role assignment: You are a quarterly-report analyst. \
                Duty: distill insights from Form 10-Q filings.",
            AgentRole::EccAnalyst => "Role assignment: You are an earnings-call analyst. \
                Duty: distill management tone and guidance from call transcripts.",
            AgentRole::DataAnalyst => "Role assignment: You are a market data analyst. \
                Duty: report price momentum and recent returns.",
            AgentRole::SelectionAnalyst => "Role assignment: You are a portfolio selection analyst. \
                Duty: report tail risk of each asset.",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: AgentId,
    pub role: AgentRole,
    pub profile_text: String,
    pub general_config: String,
}

impl AgentProfile {
    pub fn default_for(role: AgentRole, general_config: &str) -> Self {
        Self {
            agent_id: role.agent_id(),
            role,
            profile_text: role.default_profile().to_string(),
            general_config: general_config.to_string(),
        }
    }
}

/// Textual policy parameters: one prompt per analyst, the manager prompt, the
/// manager's full belief block, and the belief entries propagated to analysts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptSet {
    pub analyst_prompts: BTreeMap<AgentId, String>,
    pub manager_prompt: String,
    pub belief_block: BeliefBlock,
    #[serde(default)]
    pub analyst_beliefs: BTreeMap<AgentId, AspectText>,
}

impl PromptSet {
    pub fn initial(analysts: &[AgentRole]) -> Self {
        Self {
            analyst_prompts: analysts
                .iter()
                .map(|r| {
                    (
                        r.agent_id(),
                        "Focus on information that could move the price over the next trading day."
                            .to_string(),
                    )
                })
                .collect(),
            manager_prompt: "Decide a direction (long, short or neutral) for every ticker. \
                Explain your reasoning and credit each analyst's contribution."
                .to_string(),
            belief_block: BeliefBlock::new(),
            analyst_beliefs: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

impl Sentiment {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "positive" => Some(Sentiment::Positive),
            "negative" => Some(Sentiment::Negative),
            "neutral" => Some(Sentiment::Neutral),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightMessage {
    pub from: AgentId,
    pub date: NaiveDate,
    pub ticker: String,
    pub distilled_insight: String,
    pub sentiment: Option<Sentiment>,
    pub indicators: BTreeMap<String, f64>,
    pub cited_memory_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradingDecision {
    pub date: NaiveDate,
    pub directions: BTreeMap<String, Direction>,
    /// Signed unit positions (single stock) or solver weights (portfolio).
    pub weights: BTreeMap<String, f64>,
    pub reasoning: String,
    pub contribution_notes: BTreeMap<AgentId, String>,
    pub cited_memory_ids: Vec<String>,
}

impl TradingDecision {
    /// Weight box for each ticker implied by its direction.
    pub fn weight_boxes(&self) -> BTreeMap<String, (f64, f64)> {
        self.directions
            .iter()
            .map(|(t, d)| (t.clone(), d.bounds()))
            .collect()
    }

    pub fn is_consistent(&self) -> bool {
        self.weights.iter().all(|(t, w)| {
            self.directions.get(t).is_some_and(|d| {
                let (lo, hi) = d.bounds();
                *w >= lo && *w <= hi
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub date: NaiveDate,
    pub text: String,
    pub trigger: ReflectionTrigger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TradingMode {
    SingleStock,
    Portfolio,
}

/// Tunables for the agent layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSettings {
    pub top_k: usize,
    pub temperature: f64,
    pub max_retries: u32,
    pub default_importance: f64,
    pub decay: DecayConfig,
    /// Units held per unit direction in single-stock mode.
    pub position_size: f64,
    /// Feedback boosts fire when `|r_t| >= multiple * rolling std`.
    pub feedback_sigma_multiple: f64,
    pub feedback_window: usize,
    /// Alpha of the per-asset tail-risk figure reported by the selection analyst.
    pub selection_cvar_alpha: f64,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            top_k: crate::memory::DEFAULT_TOP_K,
            temperature: crate::llm_gateway::TRADING_TEMPERATURE,
            max_retries: crate::llm_gateway::DEFAULT_MAX_RETRIES,
            default_importance: crate::memory::DEFAULT_INITIAL_IMPORTANCE,
            decay: DecayConfig::default(),
            position_size: 1.0,
            feedback_sigma_multiple: 2.0,
            feedback_window: 20,
            selection_cvar_alpha: 0.05,
        }
    }
}

/// Shared handles every agent step needs.
pub struct AgentContext<'a> {
    pub gateway: &'a LlmGateway,
    pub memory: &'a MemoryStore,
    pub embedder: &'a dyn Embedder,
    pub settings: &'a AgentSettings,
    pub episode: Episode,
    pub general_config: &'a str,
}

impl AgentContext<'_> {
    fn memory_event(
        &self,
        event_id: String,
        owner: &AgentId,
        layer: MemoryLayer,
        content: String,
        date: NaiveDate,
        kind: Option<DocKind>,
        importance: Option<f64>,
    ) -> MemoryEvent {
        MemoryEvent {
            event_id,
            owner: owner.clone(),
            layer,
            embedding: self.embedder.embed(&content),
            content,
            initial_importance: importance.unwrap_or(self.settings.default_importance),
            decay_ratio: self.settings.decay.for_kind(kind),
            created_at: date,
            access_bonus: 0.0,
        }
    }

    fn recall(
        &self,
        owner: &AgentId,
        query_text: String,
        date: NaiveDate,
    ) -> Result<Vec<MemoryEvent>, MemoryError> {
        let query = MemoryQuery {
            embedding: self.embedder.embed(&query_text),
            query_text,
            as_of: date,
            k: self.settings.top_k,
        };
        Ok(self
            .memory
            .retrieve_top_k(owner, &query)?
            .into_iter()
            .map(|s| s.event)
            .collect())
    }
}

/// One ticker's share of an analyst's modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceItem {
    pub bar: PriceBar,
    pub indicators: Indicators,
    pub documents: Vec<TextDocument>,
    /// Trailing daily log returns up to and including the observation date.
    pub trailing_returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSlice {
    pub date: NaiveDate,
    pub tickers: BTreeMap<String, SliceItem>,
}

/// Cuts out the part of `obs` a role may see: its own document kind for text
/// analysts, prices and indicators for data roles.
pub fn slice_for(
    role: AgentRole,
    obs: &Observation,
    trailing: &BTreeMap<String, Vec<f64>>,
) -> ObservationSlice {
    let tickers = obs
        .tickers
        .iter()
        .map(|(ticker, t)| {
            let item = match role.doc_kind() {
                Some(kind) => SliceItem {
                    bar: t.bar,
                    indicators: Indicators::default(),
                    documents: t.documents_of(kind).to_vec(),
                    trailing_returns: Vec::new(),
                },
                None => SliceItem {
                    bar: t.bar,
                    indicators: t.indicators,
                    documents: Vec::new(),
                    trailing_returns: trailing.get(ticker).cloned().unwrap_or_default(),
                },
            };
            (ticker.clone(), item)
        })
        .collect();
    ObservationSlice {
        date: obs.date,
        tickers,
    }
}

fn no_signal(from: &AgentId, date: NaiveDate, ticker: &str) -> InsightMessage {
    InsightMessage {
        from: from.clone(),
        date,
        ticker: ticker.to_string(),
        distilled_insight: NO_SIGNAL.to_string(),
        sentiment: Some(Sentiment::Neutral),
        indicators: BTreeMap::new(),
        cited_memory_ids: Vec::new(),
    }
}

fn render_memories(events: &[MemoryEvent]) -> String {
    if events.is_empty() {
        return "  (none)".to_string();
    }
    events
        .iter()
        .map(|e| format!("  [{}] ({}) {}", e.event_id, e.created_at, e.content))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs one analyst over its slice and returns one message per ticker.
pub fn analyst_step(
    profile: &AgentProfile,
    prompt: &str,
    belief: Option<&AspectText>,
    slice: &ObservationSlice,
    ctx: &AgentContext<'_>,
) -> Result<Vec<InsightMessage>, AgentError> {
    if !profile.role.is_analyst() {
        return Err(AgentError::NotAnAnalyst(profile.agent_id.clone()));
    }
    match profile.role.doc_kind() {
        Some(kind) => text_analyst_step(profile, prompt, belief, slice, kind, ctx),
        None => data_analyst_step(profile, slice, ctx),
    }
}

fn text_analyst_step(
    profile: &AgentProfile,
    prompt: &str,
    belief: Option<&AspectText>,
    slice: &ObservationSlice,
    kind: DocKind,
    ctx: &AgentContext<'_>,
) -> Result<Vec<InsightMessage>, AgentError> {
    let id = &profile.agent_id;
    let date = slice.date;
    let mut messages = BTreeMap::new();
    let mut sections = Vec::new();
    let mut retrieved: BTreeMap<String, Vec<MemoryEvent>> = BTreeMap::new();

    for (ticker, item) in &slice.tickers {
        if item.documents.is_empty() {
            messages.insert(ticker.clone(), no_signal(id, date, ticker));
            continue;
        }
        for doc in &item.documents {
            ctx.memory.insert_if_absent(ctx.memory_event(
                format!("{id}/doc/{}", doc.doc_id),
                id,
                MemoryLayer::Working,
                doc.body.clone(),
                date,
                Some(kind),
                None,
            ))?;
        }
        let bodies: Vec<&str> = item.documents.iter().map(|d| d.body.as_str()).collect();
        let memories = ctx.recall(id, format!("{ticker} {}", bodies.join(" ")), date)?;
        let docs_text = item
            .documents
            .iter()
            .map(|d| format!("  [{}] {}", d.doc_id, d.body))
            .collect::<Vec<_>>()
            .join("\n");
        sections.push(format!(
            "Ticker {ticker}\nDocuments:\n{docs_text}\nRetrieved memories:\n{}",
            render_memories(&memories)
        ));
        retrieved.insert(ticker.clone(), memories);
    }

    if !retrieved.is_empty() {
        let tickers: Vec<String> = retrieved.keys().cloned().collect();
        let schema = OutputSchema::Distillation {
            tickers: tickers.clone(),
        };
        let belief_text = belief.map_or_else(String::new, |b| {
            format!("\nCurrent investment belief for your area: {}", b.render())
        });
        let request = CompletionRequest {
            role_tag: id.to_string(),
            step_key: StepKey::new(ctx.episode.to_string(), date, Phase::Analyze),
            system_prompt: format!(
                "{}\n{}\n{}{belief_text}",
                profile.profile_text, profile.general_config, prompt
            ),
            user_prompt: format!(
                "Date: {date}\n\n{}\n\n{}",
                sections.join("\n\n"),
                schema.instructions()
            ),
            output_schema: schema,
            temperature: ctx.settings.temperature,
            max_retries: ctx.settings.max_retries,
        };
        let out = ctx.gateway.complete(&request)?;
        for ticker in tickers {
            let entry = &out.fields[&ticker];
            let memories = &retrieved[&ticker];
            let retrieved_ids: Vec<String> = memories.iter().map(|m| m.event_id.clone()).collect();
            let claimed: Vec<String> = entry["cited_memory_ids"]
                .as_array()
                .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
                .unwrap_or_default();
            let cited = if claimed.is_empty() {
                retrieved_ids
            } else {
                retrieved_ids
                    .into_iter()
                    .filter(|r| claimed.contains(r))
                    .collect()
            };
            let insight = entry["insight"].as_str().unwrap_or_default().to_string();
            let sentiment = entry["sentiment"].as_str().and_then(Sentiment::parse);
            ctx.memory.insert(ctx.memory_event(
                format!("{id}/{}/{date}/{ticker}/insight", ctx.episode),
                id,
                MemoryLayer::Procedural,
                format!("{ticker}: {insight}"),
                date,
                Some(kind),
                entry["importance"].as_f64(),
            ))?;
            messages.insert(
                ticker.clone(),
                InsightMessage {
                    from: id.clone(),
                    date,
                    ticker,
                    distilled_insight: insight,
                    sentiment,
                    indicators: BTreeMap::new(),
                    cited_memory_ids: cited,
                },
            );
        }
    }
    Ok(messages.into_values().collect())
}

fn data_analyst_step(
    profile: &AgentProfile,
    slice: &ObservationSlice,
    ctx: &AgentContext<'_>,
) -> Result<Vec<InsightMessage>, AgentError> {
    let id = &profile.agent_id;
    let date = slice.date;
    let mut messages = Vec::new();
    for (ticker, item) in &slice.tickers {
        let mut indicators = BTreeMap::new();
        let (text, sentiment) = match profile.role {
            AgentRole::SelectionAnalyst => {
                match cvar(&item.trailing_returns, ctx.settings.selection_cvar_alpha) {
                    Ok(tail) => {
                        indicators.insert("cvar".to_string(), tail);
                        (
                            format!(
                                "{ticker}: trailing CVaR at {:.0}% is {tail:+.4}",
                                ctx.settings.selection_cvar_alpha * 100.0
                            ),
                            Sentiment::Neutral,
                        )
                    }
                    Err(_) => (NO_SIGNAL.to_string(), Sentiment::Neutral),
                }
            }
            _ => {
                if let Some(r) = item.indicators.log_return {
                    indicators.insert("log_return".to_string(), r);
                }
                match item.indicators.momentum {
                    Some(m) => {
                        indicators.insert("momentum".to_string(), m);
                        let sentiment = if m > 0.0 {
                            Sentiment::Positive
                        } else if m < 0.0 {
                            Sentiment::Negative
                        } else {
                            Sentiment::Neutral
                        };
                        (format!("{ticker}: momentum {m:+.4}"), sentiment)
                    }
                    None => (NO_SIGNAL.to_string(), Sentiment::Neutral),
                }
            }
        };
        if text != NO_SIGNAL {
            ctx.memory.insert(ctx.memory_event(
                format!("{id}/{}/{date}/{ticker}/insight", ctx.episode),
                id,
                MemoryLayer::Procedural,
                text.clone(),
                date,
                None,
                None,
            ))?;
        }
        messages.push(InsightMessage {
            from: id.clone(),
            date,
            ticker: ticker.clone(),
            distilled_insight: text,
            sentiment: Some(sentiment),
            indicators,
            cited_memory_ids: Vec::new(),
        });
    }
    Ok(messages)
}

/// Risk information handed to the manager before it decides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RiskStatus {
    pub alert: bool,
    pub cvar: Option<f64>,
    pub trigger: Option<ReflectionTrigger>,
}

/// Assembled manager prompts, exposed so callers can audit them.
#[derive(Debug, Clone, PartialEq)]
pub struct ManagerPrompt {
    pub system: String,
    pub user: String,
}

pub fn assemble_manager_prompt(
    profile: &AgentProfile,
    prompts: &PromptSet,
    date: NaiveDate,
    insights: &[InsightMessage],
    risk: &RiskStatus,
    memories: &[MemoryEvent],
    schema: &OutputSchema,
) -> ManagerPrompt {
    let system = format!(
        "{}\n{}\n{}\nInvestment beliefs:\n{}",
        profile.profile_text,
        profile.general_config,
        prompts.manager_prompt,
        render_belief_block(&prompts.belief_block)
    );
    let mut by_ticker: BTreeMap<&str, Vec<&InsightMessage>> = BTreeMap::new();
    for m in insights {
        by_ticker.entry(m.ticker.as_str()).or_default().push(m);
    }
    let mut user = format!("Date: {date}\n");
    for (ticker, msgs) in by_ticker {
        user.push_str(&format!("\nTicker {ticker}\n"));
        for m in msgs {
            let sentiment = m
                .sentiment
                .map(|s| format!("{s:?}").to_lowercase())
                .unwrap_or_else(|| "n/a".into());
            let indicators = m
                .indicators
                .iter()
                .map(|(k, v)| format!("{k}={v:+.6}"))
                .collect::<Vec<_>>()
                .join(", ");
            user.push_str(&format!(
                "  {} [{sentiment}] {}{}\n",
                m.from,
                m.distilled_insight,
                if indicators.is_empty() {
                    String::new()
                } else {
                    format!(" ({indicators})")
                }
            ));
        }
    }
    user.push_str(&format!(
        "\nSelf-reflections and past reasoning:\n{}\n",
        render_memories(memories)
    ));
    match risk.cvar {
        Some(c) => user.push_str(&format!("\nEpisode CVaR to date: {c:+.6}\n")),
        None => user.push_str("\nEpisode CVaR to date: n/a\n"),
    }
    if risk.alert {
        user.push_str(&format!("\n{RISK_AVERSE_CLAUSE}\n"));
    }
    user.push_str(&format!("\n{}", schema.instructions()));
    ManagerPrompt { system, user }
}

/// Consolidates analyst insights into one direction per ticker.
#[allow(clippy::too_many_arguments)]
pub fn manager_step(
    profile: &AgentProfile,
    prompts: &PromptSet,
    date: NaiveDate,
    tickers: &[String],
    analysts: &[AgentId],
    insights: &[InsightMessage],
    risk: &RiskStatus,
    mode: TradingMode,
    ctx: &AgentContext<'_>,
) -> Result<TradingDecision, AgentError> {
    for analyst in analysts {
        for ticker in tickers {
            if !insights
                .iter()
                .any(|m| &m.from == analyst && &m.ticker == ticker && m.date == date)
            {
                return Err(AgentError::MissingAnalystReport {
                    analyst: analyst.clone(),
                    ticker: ticker.clone(),
                });
            }
        }
    }
    let id = &profile.agent_id;
    let query_text = insights
        .iter()
        .map(|m| m.distilled_insight.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let memories = ctx.recall(id, format!("trading decision {} {query_text}", tickers.join(" ")), date)?;
    let schema = OutputSchema::Decision {
        tickers: tickers.to_vec(),
    };
    let prompt = assemble_manager_prompt(profile, prompts, date, insights, risk, &memories, &schema);
    let request = CompletionRequest {
        role_tag: id.to_string(),
        step_key: StepKey::new(ctx.episode.to_string(), date, Phase::Decide),
        system_prompt: prompt.system,
        user_prompt: prompt.user,
        output_schema: schema,
        temperature: ctx.settings.temperature,
        max_retries: ctx.settings.max_retries,
    };
    let out = ctx.gateway.complete(&request)?;

    let mut directions = BTreeMap::new();
    for ticker in tickers {
        let d = out.fields["actions"][ticker]
            .as_str()
            .and_then(Direction::parse)
            .expect("validated by the decision schema");
        directions.insert(ticker.clone(), d);
    }
    let weights = match mode {
        TradingMode::SingleStock => directions
            .iter()
            .map(|(t, d)| (t.clone(), d.sign() * ctx.settings.position_size))
            .collect(),
        TradingMode::Portfolio => directions.keys().map(|t| (t.clone(), 0.0)).collect(),
    };
    let reasoning = out.fields["reasoning"].as_str().unwrap_or_default().to_string();
    let contribution_notes: BTreeMap<AgentId, String> = out.fields["contributions"]
        .as_object()
        .map(|m| {
            m.iter()
                .filter_map(|(k, v)| Some((AgentId(k.clone()), v.as_str()?.to_string())))
                .collect()
        })
        .unwrap_or_default();

    let cited: BTreeSet<String> = insights
        .iter()
        .flat_map(|m| m.cited_memory_ids.iter().cloned())
        .chain(memories.iter().map(|m| m.event_id.clone()))
        .collect();

    let summary = directions
        .iter()
        .map(|(t, d)| format!("{t} {d}"))
        .collect::<Vec<_>>()
        .join(", ");
    ctx.memory.insert(ctx.memory_event(
        format!("{id}/{}/{date}/decision", ctx.episode),
        id,
        MemoryLayer::Procedural,
        format!("Decision {summary}. {reasoning}"),
        date,
        None,
        None,
    ))?;

    Ok(TradingDecision {
        date,
        directions,
        weights,
        reasoning,
        contribution_notes,
        cited_memory_ids: cited.into_iter().collect(),
    })
}

/// Asks the manager for a self-reflection after a risk trigger and stores it
/// in episodic memory.
pub fn manager_reflect(
    profile: &AgentProfile,
    date: NaiveDate,
    trigger: ReflectionTrigger,
    context: &str,
    ctx: &AgentContext<'_>,
) -> Result<Reflection, AgentError> {
    let schema = OutputSchema::Reflection;
    let why = match trigger {
        ReflectionTrigger::CvarDrop => "the episode CVaR dropped",
        ReflectionTrigger::NegativePnl => "the last decision lost money",
    };
    let request = CompletionRequest {
        role_tag: profile.agent_id.to_string(),
        step_key: StepKey::new(ctx.episode.to_string(), date, Phase::Reflect),
        system_prompt: format!("{}\n{}", profile.profile_text, profile.general_config),
        user_prompt: format!(
            "Reflect on your trading on {date}: {why}.\n{context}\n\n{}",
            schema.instructions()
        ),
        output_schema: schema,
        temperature: ctx.settings.temperature,
        max_retries: ctx.settings.max_retries,
    };
    let out = ctx.gateway.complete(&request)?;
    let text = out.fields["reflection"].as_str().unwrap_or_default().to_string();
    ctx.memory.insert(ctx.memory_event(
        format!("{}/{}/{date}/reflection", profile.agent_id, ctx.episode),
        &profile.agent_id,
        MemoryLayer::Episodic,
        text.clone(),
        date,
        None,
        None,
    ))?;
    Ok(Reflection {
        date,
        text,
        trigger,
    })
}

/// Whether `r_t` counts as a significant gain or loss: nonzero and at least
/// `multiple` standard deviations (sample, over the last `window` prior
/// values) in size. Needs two prior values.
pub fn is_significant(r_t: f64, prior: &[f64], multiple: f64, window: usize) -> bool {
    let recent = &prior[prior.len().saturating_sub(window)..];
    if recent.len() < 2 || r_t == 0.0 {
        return false;
    }
    let n = recent.len() as f64;
    let mean = recent.iter().sum::<f64>() / n;
    let var = recent.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    r_t.abs() >= multiple * var.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMessage {
    pub to: AgentId,
    pub date: NaiveDate,
    pub text: String,
    pub boosted_memory_ids: Vec<String>,
}

/// Reports the realized outcome of `decision` to each analyst. On significant
/// days every cited memory event gets the access boost.
pub fn send_feedback(
    decision: &TradingDecision,
    pnl: f64,
    significant: bool,
    analysts: &[AgentId],
    ctx: &AgentContext<'_>,
) -> Result<Vec<FeedbackMessage>, AgentError> {
    let mut boosted = Vec::new();
    if significant {
        for id in &decision.cited_memory_ids {
            ctx.memory.boost_access(id)?;
            boosted.push(id.clone());
        }
    }
    let summary = decision
        .directions
        .iter()
        .map(|(t, d)| format!("{t} {d}"))
        .collect::<Vec<_>>()
        .join(", ");
    let mut out = Vec::new();
    for analyst in analysts {
        let note = decision
            .contribution_notes
            .get(analyst)
            .map(String::as_str)
            .unwrap_or("no specific credit");
        let text = format!(
            "Outcome of {} decision ({summary}): PnL {pnl:+.6}{}. Your contribution: {note}",
            decision.date,
            if significant { " (significant)" } else { "" }
        );
        ctx.memory.insert(ctx.memory_event(
            format!("{analyst}/{}/{}/feedback", ctx.episode, decision.date),
            analyst,
            MemoryLayer::Procedural,
            text.clone(),
            decision.date,
            None,
            None,
        ))?;
        let mine = boosted
            .iter()
            .filter(|id| id.starts_with(&format!("{analyst}/")))
            .cloned()
            .collect();
        out.push(FeedbackMessage {
            to: analyst.clone(),
            date: decision.date,
            text,
            boosted_memory_ids: mine,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "node", content = "id", rename_all = "snake_case")]
pub enum Node {
    Manager,
    Analyst(AgentId),
    RiskControl,
}

impl std::fmt::Display for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Node::Manager => f.write_str("manager"),
            Node::Analyst(id) => write!(f, "{id}"),
            Node::RiskControl => f.write_str("risk_control"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Insight,
    Decision,
    Feedback,
    RiskAlert,
    BeliefUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub from: Node,
    pub to: Node,
    pub kind: MessageKind,
    pub date: NaiveDate,
}

/// The two-level tree: analysts and risk control hang off the manager.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Topology {
    analysts: BTreeSet<AgentId>,
}

impl Topology {
    pub fn new(analysts: impl IntoIterator<Item = AgentId>) -> Self {
        Self {
            analysts: analysts.into_iter().collect(),
        }
    }

    fn knows(&self, node: &Node) -> bool {
        match node {
            Node::Analyst(id) => self.analysts.contains(id),
            _ => true,
        }
    }

    pub fn is_edge(&self, from: &Node, to: &Node) -> bool {
        if !self.knows(from) || !self.knows(to) {
            return false;
        }
        matches!(
            (from, to),
            (Node::Analyst(_), Node::Manager)
                | (Node::Manager, Node::Analyst(_))
                | (Node::RiskControl, Node::Manager)
                | (Node::Manager, Node::RiskControl)
        )
    }
}

/// Delivers `message` if it follows a tree edge.
pub fn route(message: Envelope, topology: &Topology) -> Result<Envelope, AgentError> {
    if topology.is_edge(&message.from, &message.to) {
        Ok(message)
    } else {
        Err(AgentError::IllegalRoute {
            from: message.from.to_string(),
            to: message.to.to_string(),
        })
    }
}

/// Records every delivered envelope so message volume can be audited.
#[derive(Debug, Default)]
pub struct MessageBus {
    topology: Topology,
    delivered: Mutex<Vec<Envelope>>,
}

impl MessageBus {
    pub fn new(topology: Topology) -> Self {
        Self {
            topology,
            delivered: Mutex::new(Vec::new()),
        }
    }

    pub fn send(&self, from: Node, to: Node, kind: MessageKind, date: NaiveDate) -> Result<(), AgentError> {
        let envelope = route(Envelope { from, to, kind, date }, &self.topology)?;
        self.delivered.lock().expect("bus poisoned").push(envelope);
        Ok(())
    }

    /// Belief update: risk control -> manager, then manager -> each target analyst.
    pub fn propagate_beliefs(&self, targets: &[AgentId], date: NaiveDate) -> Result<usize, AgentError> {
        self.send(Node::RiskControl, Node::Manager, MessageKind::BeliefUpdate, date)?;
        let mut sent = 1;
        for t in targets.iter().filter(|t| t.as_str() != "manager") {
            self.send(Node::Manager, Node::Analyst(t.clone()), MessageKind::BeliefUpdate, date)?;
            sent += 1;
        }
        Ok(sent)
    }

    pub fn count_on(&self, date: NaiveDate) -> usize {
        self.delivered
            .lock()
            .expect("bus poisoned")
            .iter()
            .filter(|e| e.date == date)
            .count()
    }

    pub fn delivered(&self) -> Vec<Envelope> {
        self.delivered.lock().expect("bus poisoned").clone()
    }

    pub fn clear(&self) {
        self.delivered.lock().expect("bus poisoned").clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_ingest::TradingCalendar;
    use crate::llm_gateway::{MockBackend, MockScriptEntry};
    use crate::memory::HashEmbedder;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn store() -> MemoryStore {
        let start = d("2023-01-02");
        MemoryStore::new(
            64,
            TradingCalendar::new((0..40).map(|i| start + chrono::Days::new(i)).collect()),
        )
    }

    fn gateway(entries: &[(&str, &str, &str)]) -> LlmGateway {
        LlmGateway::mock(
            MockBackend::from_entries(entries.iter().map(|(r, k, v)| MockScriptEntry {
                role_tag: r.to_string(),
                step_key: k.to_string(),
                response: v.to_string(),
            }))
            .unwrap(),
        )
    }

    fn bar(date: NaiveDate, px: f64) -> PriceBar {
        PriceBar {
            date,
            open: px,
            high: px,
            low: px,
            close: px,
            adj_close: px,
            volume: 1,
        }
    }

    fn slice(date: NaiveDate, docs: Vec<TextDocument>, momentum: Option<f64>) -> ObservationSlice {
        ObservationSlice {
            date,
            tickers: BTreeMap::from([(
                "TSLA".to_string(),
                SliceItem {
                    bar: bar(date, 100.0),
                    indicators: Indicators {
                        log_return: None,
                        momentum,
                    },
                    documents: docs,
                    trailing_returns: Vec::new(),
                },
            )]),
        }
    }

    fn ctx<'a>(gw: &'a LlmGateway, mem: &'a MemoryStore, settings: &'a AgentSettings) -> AgentContext<'a> {
        AgentContext {
            gateway: gw,
            memory: mem,
            embedder: &HashEmbedder,
            settings,
            episode: Episode::Train(1),
            general_config: "",
        }
    }

    #[test]
    fn empty_news_day_is_no_signal() {
        let gw = gateway(&[]);
        let mem = store();
        let settings = AgentSettings::default();
        let c = ctx(&gw, &mem, &settings);
        let profile = AgentProfile::default_for(AgentRole::NewsAnalyst, "");
        let out = analyst_step(&profile, "", None, &slice(d("2023-01-05"), vec![], None), &c).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].distilled_insight, NO_SIGNAL);
        assert_eq!(out[0].sentiment, Some(Sentiment::Neutral));
        assert_eq!(gw.calls_in_phase(Phase::Analyze), 0);
    }

    #[test]
    fn scripted_news_distillation() {
        let gw = gateway(&[(
            "news_analyst",
            "1:2023-01-05:analyze",
            r#"{"insight": "Deliveries beat; demand strong", "sentiment": "positive"}"#,
        )]);
        let mem = store();
        let settings = AgentSettings::default();
        let c = ctx(&gw, &mem, &settings);
        let docs = ["n1", "n2"]
            .iter()
            .map(|id| TextDocument {
                doc_id: id.to_string(),
                ticker: "TSLA".into(),
                kind: DocKind::News,
                published: d("2023-01-05"),
                body: format!("TSLA deliveries report {id}"),
            })
            .collect();
        let profile = AgentProfile::default_for(AgentRole::NewsAnalyst, "");
        let out = analyst_step(&profile, "", None, &slice(d("2023-01-05"), docs, None), &c).unwrap();
        assert_eq!(out[0].distilled_insight, "Deliveries beat; demand strong");
        assert_eq!(out[0].sentiment, Some(Sentiment::Positive));
        let mut cited = out[0].cited_memory_ids.clone();
        cited.sort();
        assert_eq!(cited, ["news_analyst/doc/n1", "news_analyst/doc/n2"]);
        assert!(cited.iter().all(|id| mem.contains(id)));
        assert!(mem.contains("news_analyst/1/2023-01-05/TSLA/insight"));
    }

    #[test]
    fn data_analyst_reports_momentum() {
        let gw = gateway(&[]);
        let mem = store();
        let settings = AgentSettings::default();
        let c = ctx(&gw, &mem, &settings);
        let profile = AgentProfile::default_for(AgentRole::DataAnalyst, "");
        let out = analyst_step(&profile, "", None, &slice(d("2023-01-05"), vec![], Some(0.10)), &c).unwrap();
        assert!((out[0].indicators["momentum"] - 0.10).abs() < 1e-12);
        assert_eq!(out[0].sentiment, Some(Sentiment::Positive));
    }

    fn insight(from: &str, ticker: &str, date: NaiveDate) -> InsightMessage {
        InsightMessage {
            from: AgentId::from(from),
            date,
            ticker: ticker.into(),
            distilled_insight: "steady".into(),
            sentiment: Some(Sentiment::Neutral),
            indicators: BTreeMap::new(),
            cited_memory_ids: vec![],
        }
    }

    #[test]
    fn manager_long_single_stock() {
        let date = d("2023-01-05");
        let gw = gateway(&[("manager", "1:2023-01-05:decide", r#"{"action":"long"}"#)]);
        let mem = store();
        let settings = AgentSettings::default();
        let c = ctx(&gw, &mem, &settings);
        let profile = AgentProfile::default_for(AgentRole::Manager, "");
        let decision = manager_step(
            &profile,
            &PromptSet::initial(&[AgentRole::DataAnalyst]),
            date,
            &["TSLA".into()],
            &[AgentId::from("data_analyst")],
            &[insight("data_analyst", "TSLA", date)],
            &RiskStatus::default(),
            TradingMode::SingleStock,
            &c,
        )
        .unwrap();
        assert_eq!(decision.directions["TSLA"], Direction::Long);
        assert_eq!(decision.weights["TSLA"], 1.0);
        assert!(decision.is_consistent());
        assert!(mem.contains("manager/1/2023-01-05/decision"));
    }

    #[test]
    fn manager_requires_all_reports() {
        let date = d("2023-01-05");
        let gw = gateway(&[("manager", "1:2023-01-05:decide", r#"{"action":"long"}"#)]);
        let mem = store();
        let settings = AgentSettings::default();
        let c = ctx(&gw, &mem, &settings);
        let err = manager_step(
            &AgentProfile::default_for(AgentRole::Manager, ""),
            &PromptSet::default(),
            date,
            &["TSLA".into()],
            &[AgentId::from("news_analyst")],
            &[],
            &RiskStatus::default(),
            TradingMode::SingleStock,
            &c,
        )
        .unwrap_err();
        assert!(matches!(err, AgentError::MissingAnalystReport { .. }));
    }

    #[test]
    fn risk_alert_adds_clause() {
        let date = d("2023-01-05");
        let gw = gateway(&[("manager", "1:2023-01-05:decide", r#"{"action":"neutral"}"#)]);
        let mem = store();
        let settings = AgentSettings::default();
        let c = ctx(&gw, &mem, &settings);
        let risk = RiskStatus {
            alert: true,
            cvar: Some(-0.03),
            trigger: Some(ReflectionTrigger::CvarDrop),
        };
        let decision = manager_step(
            &AgentProfile::default_for(AgentRole::Manager, ""),
            &PromptSet::default(),
            date,
            &["TSLA".into()],
            &[],
            &[],
            &risk,
            TradingMode::SingleStock,
            &c,
        )
        .unwrap();
        assert_eq!(decision.directions["TSLA"], Direction::Neutral);
        assert_eq!(decision.weights["TSLA"], 0.0);
        let log = gw.take_log();
        assert!(log[0].user_prompt.contains(RISK_AVERSE_CLAUSE));

        let calm = assemble_manager_prompt(
            &AgentProfile::default_for(AgentRole::Manager, ""),
            &PromptSet::default(),
            date,
            &[],
            &RiskStatus::default(),
            &[],
            &OutputSchema::Reflection,
        );
        assert!(!calm.user.contains(RISK_AVERSE_CLAUSE));
    }

    #[test]
    fn portfolio_directions_map_to_boxes() {
        let date = d("2023-01-05");
        let gw = gateway(&[(
            "manager",
            "1:2023-01-05:decide",
            r#"{"actions": {"AAA": "long", "BBB": "short", "CCC": "neutral"}}"#,
        )]);
        let mem = store();
        let settings = AgentSettings::default();
        let c = ctx(&gw, &mem, &settings);
        let decision = manager_step(
            &AgentProfile::default_for(AgentRole::Manager, ""),
            &PromptSet::default(),
            date,
            &["AAA".into(), "BBB".into(), "CCC".into()],
            &[],
            &[],
            &RiskStatus::default(),
            TradingMode::Portfolio,
            &c,
        )
        .unwrap();
        let boxes = decision.weight_boxes();
        assert_eq!(boxes["AAA"], (0.0, 1.0));
        assert_eq!(boxes["BBB"], (-1.0, 0.0));
        assert_eq!(boxes["CCC"], (0.0, 0.0));
    }

    fn seeded_decision(mem: &MemoryStore, ids: &[&str]) -> TradingDecision {
        for id in ids {
            mem.insert(MemoryEvent {
                event_id: id.to_string(),
                owner: AgentId::from("news_analyst"),
                layer: MemoryLayer::Working,
                content: "x".into(),
                embedding: HashEmbedder.embed("x"),
                initial_importance: 0.5,
                decay_ratio: 0.9,
                created_at: d("2023-01-03"),
                access_bonus: 0.0,
            })
            .unwrap();
        }
        TradingDecision {
            date: d("2023-01-05"),
            directions: BTreeMap::from([("TSLA".into(), Direction::Long)]),
            weights: BTreeMap::from([("TSLA".into(), 1.0)]),
            reasoning: String::new(),
            contribution_notes: BTreeMap::new(),
            cited_memory_ids: ids.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn feedback_boosts_only_when_significant() {
        let gw = gateway(&[]);
        let mem = store();
        let settings = AgentSettings::default();
        let c = ctx(&gw, &mem, &settings);
        let decision = seeded_decision(&mem, &["news_analyst/doc/a", "news_analyst/doc/b"]);
        let analysts = [AgentId::from("news_analyst")];
        let fb = send_feedback(&decision, 0.001, false, &analysts, &c).unwrap();
        assert!(fb[0].boosted_memory_ids.is_empty());
        assert_eq!(mem.get("news_analyst/doc/a").unwrap().access_bonus, 0.0);

        let c2 = AgentContext { episode: Episode::Train(2), ..c };
        send_feedback(&decision, 0.05, true, &analysts, &c2).unwrap();
        assert_eq!(mem.get("news_analyst/doc/a").unwrap().access_bonus, 5.0);
        assert_eq!(mem.get("news_analyst/doc/b").unwrap().access_bonus, 5.0);
        let c3 = AgentContext { episode: Episode::Train(3), ..c2 };
        send_feedback(&decision, -0.05, true, &analysts, &c3).unwrap();
        assert_eq!(mem.get("news_analyst/doc/a").unwrap().access_bonus, 10.0);
    }

    #[test]
    fn significance_rule() {
        let prior = [0.01, -0.01, 0.01, -0.01];
        // sample std = sqrt(0.0004 / 3) ~ 0.011547
        assert!(is_significant(0.024, &prior, 2.0, 20));
        assert!(!is_significant(0.02, &prior, 2.0, 20));
        assert!(!is_significant(0.5, &[0.01], 2.0, 20));
        assert!(!is_significant(0.0, &[0.0, 0.0, 0.0], 2.0, 20));
    }

    #[test]
    fn routing_rules() {
        let topo = Topology::new([AgentId::from("news_analyst"), AgentId::from("data_analyst")]);
        let date = d("2023-01-05");
        let news = Node::Analyst(AgentId::from("news_analyst"));
        let data = Node::Analyst(AgentId::from("data_analyst"));
        assert!(route(
            Envelope { from: news.clone(), to: Node::Manager, kind: MessageKind::Insight, date },
            &topo
        )
        .is_ok());
        assert!(matches!(
            route(Envelope { from: news, to: data, kind: MessageKind::Insight, date }, &topo),
            Err(AgentError::IllegalRoute { .. })
        ));
        let bus = MessageBus::new(topo);
        let sent = bus.propagate_beliefs(&[AgentId::from("manager"), AgentId::from("data_analyst")], date).unwrap();
        assert_eq!(sent, 2);
        let delivered = bus.delivered();
        assert_eq!(delivered[0].from, Node::RiskControl);
        assert_eq!(delivered[0].to, Node::Manager);
        assert_eq!(delivered[1].to, Node::Analyst(AgentId::from("data_analyst")));
        assert!(bus
            .send(Node::RiskControl, Node::Analyst(AgentId::from("news_analyst")), MessageKind::BeliefUpdate, date)
            .is_err());
    }
}
