//! The single boundary for language-model calls.
//!
//! Every agent response is requested as JSON and validated against a
//! registered [`OutputSchema`]. Responses that fail validation are retried with
//! a corrective suffix quoting the validation error. Backends are either an
//! OpenAI-compatible chat-completions endpoint or a [`MockBackend`] that
//! answers from a script keyed by `(role_tag, step_key)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::beliefs::{Aspect, AspectText};

pub const ENV_ENDPOINT: &str = "FINCON_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "FINCON_LLM_API_KEY";
pub const ENV_MODEL: &str = "FINCON_LLM_MODEL";

pub const TRADING_TEMPERATURE: f64 = 0.3;
pub const BELIEF_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_RETRIES: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("`{schema}` output still invalid after {attempts} attempts: {last_error}")]
    SchemaViolationAfterRetries {
        schema: &'static str,
        attempts: u32,
        last_error: String,
    },
    #[error("no scripted response for role `{role_tag}` at `{step_key}`")]
    MissingScriptEntry { role_tag: String, step_key: String },
    #[error("mock script line {line}: {detail}")]
    SchemaError { line: usize, detail: String },
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Analyze,
    Decide,
    Reflect,
    Conceptualize,
    BeliefUpdate,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Analyze,
        Phase::Decide,
        Phase::Reflect,
        Phase::Conceptualize,
        Phase::BeliefUpdate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Analyze => "analyze",
            Phase::Decide => "decide",
            Phase::Reflect => "reflect",
            Phase::Conceptualize => "conceptualize",
            Phase::BeliefUpdate => "belief_update",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

/// `<episode>:<date>:<phase>`, e.g. `2:2022-03-01:decide` or `test:2022-11-01:reflect`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StepKey {
    pub episode: String,
    pub date: NaiveDate,
    pub phase: Phase,
}

impl StepKey {
    pub fn new(episode: impl Into<String>, date: NaiveDate, phase: Phase) -> Self {
        Self {
            episode: episode.into(),
            date,
            phase,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.split(':');
        let episode = parts.next()?;
        let date = NaiveDate::parse_from_str(parts.next()?, "%Y-%m-%d").ok()?;
        let phase = Phase::parse(parts.next()?)?;
        if episode.is_empty() || parts.next().is_some() {
            return None;
        }
        Some(Self::new(episode, date, phase))
    }
}

impl fmt::Display for StepKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}",
            self.episode,
            self.date.format("%Y-%m-%d"),
            self.phase.as_str()
        )
    }
}

/// Registered structured-output schemas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputSchema {
    /// Per-ticker insight and sentiment. With a single requested ticker the
    /// flat form `{"insight": .., "sentiment": ..}` is also accepted.
    Distillation { tickers: Vec<String> },
    /// Per-ticker direction. With a single ticker `{"action": ..}` is accepted.
    Decision { tickers: Vec<String> },
    Reflection,
    Conceptualization,
    MetaPrompt,
    BeliefRewrite,
}

impl OutputSchema {
    pub fn id(&self) -> &'static str {
        match self {
            OutputSchema::Distillation { .. } => "distillation",
            OutputSchema::Decision { .. } => "decision",
            OutputSchema::Reflection => "reflection",
            OutputSchema::Conceptualization => "conceptualization",
            OutputSchema::MetaPrompt => "meta_prompt",
            OutputSchema::BeliefRewrite => "belief_rewrite",
        }
    }

    /// Short description of the expected JSON, appended to prompts.
    pub fn instructions(&self) -> String {
        let aspects = Aspect::vocabulary().join("\", \"");
        match self {
            OutputSchema::Distillation { tickers } => format!(
                "Respond with JSON only: an object keyed by ticker ({}), each value \
                 {{\"insight\": string, \"sentiment\": \"positive\"|\"negative\"|\"neutral\", \
                 \"cited_memory_ids\": [string], \"importance\": number in [0,1]}}.",
                tickers.join(", ")
            ),
            OutputSchema::Decision { tickers } => format!(
                "Respond with JSON only: {{\"actions\": {{<ticker>: \"long\"|\"short\"|\"neutral\"}} \
                 for tickers {}, \"reasoning\": string, \"contributions\": {{<analyst id>: string}}}}.",
                tickers.join(", ")
            ),
            OutputSchema::Reflection => {
                "Respond with JSON only: {\"reflection\": string}.".to_string()
            }
            OutputSchema::Conceptualization => format!(
                "Respond with JSON only: {{\"insights\": {{<aspect>: string or [string]}}}} \
                 where each aspect is one of \"{aspects}\"."
            ),
            OutputSchema::MetaPrompt => format!(
                "Respond with JSON only: {{\"meta_prompt\": {{<aspect>: string}}, \"reasoning\": string}} \
                 where each aspect is one of \"{aspects}\"."
            ),
            OutputSchema::BeliefRewrite => format!(
                "Respond with JSON only: {{\"beliefs\": {{<aspect>: string or [string]}}}} \
                 where each aspect is one of \"{aspects}\"."
            ),
        }
    }

    /// Validates `value` and returns its normalized form.
    pub fn validate(&self, value: &Value) -> Result<Value, String> {
        let obj = value
            .as_object()
            .ok_or_else(|| "top-level value must be a JSON object".to_string())?;
        match self {
            OutputSchema::Distillation { tickers } => validate_distillation(obj, tickers),
            OutputSchema::Decision { tickers } => validate_decision(obj, tickers),
            OutputSchema::Reflection => {
                let text = non_empty_str(obj, "reflection")?;
                Ok(json!({ "reflection": text }))
            }
            OutputSchema::Conceptualization => {
                let insights = aspect_map(obj, "insights", true)?;
                Ok(json!({ "insights": insights }))
            }
            OutputSchema::MetaPrompt => {
                let direction = aspect_map(obj, "meta_prompt", false)?;
                if direction.is_empty() {
                    return Err("`meta_prompt` must name at least one aspect".into());
                }
                let mut out = Map::new();
                out.insert("meta_prompt".into(), Value::Object(direction));
                if let Some(r) = optional_str(obj, "reasoning")? {
                    out.insert("reasoning".into(), Value::String(r));
                }
                Ok(Value::Object(out))
            }
            OutputSchema::BeliefRewrite => {
                let beliefs = aspect_map(obj, "beliefs", true)?;
                if beliefs.is_empty() {
                    return Err("`beliefs` must not be empty".into());
                }
                Ok(json!({ "beliefs": beliefs }))
            }
        }
    }
}

fn non_empty_str(obj: &Map<String, Value>, key: &str) -> Result<String, String> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        Some(_) => Err(format!("`{key}` must be a non-empty string")),
        None => Err(format!("missing `{key}`")),
    }
}

fn optional_str(obj: &Map<String, Value>, key: &str) -> Result<Option<String>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(format!("`{key}` must be a string")),
    }
}

fn string_list(obj: &Map<String, Value>, key: &str) -> Result<Vec<String>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| format!("`{key}` must contain strings"))
            })
            .collect(),
        Some(_) => Err(format!("`{key}` must be an array of strings")),
    }
}

const SENTIMENTS: [&str; 3] = ["positive", "negative", "neutral"];
const DIRECTIONS: [&str; 3] = ["long", "short", "neutral"];

fn validate_insight(ticker: &str, value: &Value) -> Result<Value, String> {
    let obj = value
        .as_object()
        .ok_or_else(|| format!("entry for `{ticker}` must be an object"))?;
    let insight = non_empty_str(obj, "insight")?;
    let sentiment = non_empty_str(obj, "sentiment")?;
    if !SENTIMENTS.contains(&sentiment.as_str()) {
        return Err(format!(
            "sentiment `{sentiment}` for `{ticker}` is not one of positive, negative, neutral"
        ));
    }
    let cited = string_list(obj, "cited_memory_ids")?;
    let mut out = Map::new();
    out.insert("insight".into(), Value::String(insight));
    out.insert("sentiment".into(), Value::String(sentiment));
    out.insert("cited_memory_ids".into(), json!(cited));
    match obj.get("importance") {
        None | Some(Value::Null) => {}
        Some(v) => {
            let x = v
                .as_f64()
                .filter(|x| (0.0..=1.0).contains(x))
                .ok_or_else(|| format!("importance for `{ticker}` must be a number in [0, 1]"))?;
            out.insert("importance".into(), json!(x));
        }
    }
    Ok(Value::Object(out))
}

fn validate_distillation(obj: &Map<String, Value>, tickers: &[String]) -> Result<Value, String> {
    let mut out = Map::new();
    if tickers.len() == 1 && obj.contains_key("insight") {
        out.insert(
            tickers[0].clone(),
            validate_insight(&tickers[0], &Value::Object(obj.clone()))?,
        );
        return Ok(Value::Object(out));
    }
    if let Some(extra) = obj.keys().find(|k| !tickers.contains(k)) {
        return Err(format!("unexpected ticker `{extra}`"));
    }
    for ticker in tickers {
        let entry = obj
            .get(ticker)
            .ok_or_else(|| format!("missing entry for ticker `{ticker}`"))?;
        out.insert(ticker.clone(), validate_insight(ticker, entry)?);
    }
    Ok(Value::Object(out))
}

fn validate_direction(ticker: &str, value: &Value) -> Result<Value, String> {
    match value.as_str() {
        Some(d) if DIRECTIONS.contains(&d) => Ok(Value::String(d.to_string())),
        Some(d) => Err(format!(
            "action `{d}` for `{ticker}` is not one of long, short, neutral"
        )),
        None => Err(format!("action for `{ticker}` must be a string")),
    }
}

fn validate_decision(obj: &Map<String, Value>, tickers: &[String]) -> Result<Value, String> {
    let mut actions = Map::new();
    match (obj.get("action"), obj.get("actions")) {
        (Some(single), None) if tickers.len() == 1 => {
            actions.insert(tickers[0].clone(), validate_direction(&tickers[0], single)?);
        }
        (Some(_), None) => {
            return Err("`action` is only accepted for a single ticker; use `actions`".into())
        }
        (None, Some(Value::Object(map))) => {
            if let Some(extra) = map.keys().find(|k| !tickers.contains(k)) {
                return Err(format!("unexpected ticker `{extra}` in `actions`"));
            }
            for ticker in tickers {
                let v = map
                    .get(ticker)
                    .ok_or_else(|| format!("missing action for ticker `{ticker}`"))?;
                actions.insert(ticker.clone(), validate_direction(ticker, v)?);
            }
        }
        (None, Some(_)) => return Err("`actions` must be an object".into()),
        (Some(_), Some(_)) => return Err("give either `action` or `actions`, not both".into()),
        (None, None) => return Err("missing `action`/`actions`".into()),
    }
    let mut contributions = Map::new();
    match obj.get("contributions") {
        None | Some(Value::Null) => {}
        Some(Value::Object(map)) => {
            for (k, v) in map {
                let text = v
                    .as_str()
                    .ok_or_else(|| format!("contribution for `{k}` must be a string"))?;
                contributions.insert(k.clone(), Value::String(text.to_string()));
            }
        }
        Some(_) => return Err("`contributions` must be an object".into()),
    }
    Ok(json!({
        "actions": actions,
        "reasoning": optional_str(obj, "reasoning")?.unwrap_or_default(),
        "contributions": contributions,
    }))
}

fn aspect_map(
    obj: &Map<String, Value>,
    key: &str,
    allow_lists: bool,
) -> Result<Map<String, Value>, String> {
    let map = match obj.get(key) {
        Some(Value::Object(map)) => map,
        Some(_) => return Err(format!("`{key}` must be an object keyed by aspect")),
        None => return Err(format!("missing `{key}`")),
    };
    let mut out = Map::new();
    for (aspect, v) in map {
        if Aspect::parse(aspect).is_none() {
            return Err(format!(
                "aspect `{aspect}` is not in the vocabulary ({})",
                Aspect::vocabulary().join(", ")
            ));
        }
        let ok = match v {
            Value::String(s) => !s.trim().is_empty(),
            Value::Array(_) if allow_lists => AspectText::from_json(v).is_some(),
            _ => false,
        };
        if !ok {
            return Err(format!("value for aspect `{aspect}` must be non-empty text"));
        }
        out.insert(aspect.clone(), v.clone());
    }
    Ok(out)
}

/// Pulls the JSON object out of raw model text, tolerating code fences and
/// surrounding prose.
pub fn extract_json(raw: &str) -> Result<Value, String> {
    let start = raw.find('{').ok_or("no JSON object in response")?;
    let end = raw.rfind('}').ok_or("no JSON object in response")?;
    if end < start {
        return Err("no JSON object in response".into());
    }
    serde_json::from_str(&raw[start..=end]).map_err(|e| format!("invalid JSON: {e}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub role_tag: String,
    pub step_key: StepKey,
    pub system_prompt: String,
    pub user_prompt: String,
    pub output_schema: OutputSchema,
    pub temperature: f64,
    pub max_retries: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedOutput {
    pub schema: &'static str,
    pub fields: Value,
    pub raw_text: String,
}

/// One attempted call, kept for the prompt audit log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CallRecord {
    pub role_tag: String,
    pub step_key: String,
    pub attempt: u32,
    pub schema: &'static str,
    pub temperature: f64,
    pub system_prompt: String,
    pub user_prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub trait LlmBackend: Send + Sync {
    /// Returns the raw text for one attempt. `user_prompt` already carries any
    /// corrective suffix.
    fn generate(&self, request: &CompletionRequest, user_prompt: &str)
        -> Result<String, GatewayError>;

    fn is_network(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScriptEntry {
    pub role_tag: String,
    pub step_key: String,
    pub response: String,
}

/// Scripted backend. Answers by exact `(role_tag, step_key)` lookup and never
/// improvises.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    entries: HashMap<(String, String), String>,
}

impl MockBackend {
    pub fn from_entries(
        entries: impl IntoIterator<Item = MockScriptEntry>,
    ) -> Result<Self, GatewayError> {
        let mut map = HashMap::new();
        for (i, e) in entries.into_iter().enumerate() {
            let line = i + 1;
            if e.role_tag.is_empty() {
                return Err(GatewayError::SchemaError {
                    line,
                    detail: "empty role_tag".into(),
                });
            }
            if StepKey::parse(&e.step_key).is_none() {
                return Err(GatewayError::SchemaError {
                    line,
                    detail: format!(
                        "step_key `{}` is not `<episode>:<date>:<phase>`",
                        e.step_key
                    ),
                });
            }
            let key = (e.role_tag, e.step_key);
            if map.contains_key(&key) {
                return Err(GatewayError::SchemaError {
                    line,
                    detail: format!("duplicate entry for ({}, {})", key.0, key.1),
                });
            }
            map.insert(key, e.response);
        }
        Ok(Self { entries: map })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_mock_script(path: &Path) -> Result<MockBackend, GatewayError> {
    let file = File::open(path).map_err(|e| GatewayError::SchemaError {
        line: 0,
        detail: format!("{}: {e}", path.display()),
    })?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GatewayError::SchemaError {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: MockScriptEntry =
            serde_json::from_str(&line).map_err(|e| GatewayError::SchemaError {
                line: i + 1,
                detail: e.to_string(),
            })?;
        entries.push(entry);
    }
    MockBackend::from_entries(entries)
}

impl LlmBackend for MockBackend {
    fn generate(&self, request: &CompletionRequest, _: &str) -> Result<String, GatewayError> {
        let key = (request.role_tag.clone(), request.step_key.to_string());
        self.entries
            .get(&key)
            .cloned()
            .ok_or(GatewayError::MissingScriptEntry {
                role_tag: key.0,
                step_key: key.1,
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpSettings {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    /// Minimum spacing between consecutive requests.
    pub min_interval: Duration,
    pub seed: Option<u64>,
}

impl HttpSettings {
    /// Reads endpoint, key and model from the environment.
    pub fn from_env(timeout: Duration, min_interval: Duration, seed: Option<u64>) -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty())?;
        Some(Self {
            endpoint,
            api_key: std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty()),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4-turbo".to_string()),
            timeout,
            min_interval,
            seed,
        })
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend {
    settings: HttpSettings,
    url: String,
    client: reqwest::blocking::Client,
    last_request: Mutex<Option<Instant>>,
}

impl HttpBackend {
    pub fn new(settings: HttpSettings) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .connect_timeout(settings.timeout)
            .build()
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        let base = settings.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        Ok(Self {
            settings,
            url,
            client,
            last_request: Mutex::new(None),
        })
    }

    fn pace(&self) {
        let mut last = self.last_request.lock().expect("rate limiter poisoned");
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.settings.min_interval {
                std::thread::sleep(self.settings.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

impl LlmBackend for HttpBackend {
    fn generate(
        &self,
        request: &CompletionRequest,
        user_prompt: &str,
    ) -> Result<String, GatewayError> {
        self.pace();
        let mut body = json!({
            "model": self.settings.model,
            "temperature": request.temperature,
            "response_format": { "type": "json_object" },
            "messages": [
                { "role": "system", "content": request.system_prompt },
                { "role": "user", "content": user_prompt },
            ],
        });
        if let Some(seed) = self.settings.seed {
            body["seed"] = json!(seed);
        }
        let mut http = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.settings.api_key {
            http = http.bearer_auth(key);
        }
        let response = http.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(self.settings.timeout)
            } else {
                GatewayError::BackendUnavailable(e.to_string())
            }
        })?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(GatewayError::BackendUnavailable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(GatewayError::Protocol(format!("HTTP {status}")));
        }
        let payload: Value = response.json().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(self.settings.timeout)
            } else {
                GatewayError::Protocol(e.to_string())
            }
        })?;
        payload["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Protocol("response has no message content".into()))
    }

    fn is_network(&self) -> bool {
        true
    }
}

/// Validating, retrying front end over a backend. Safe to share across
/// analyst workers.
pub struct LlmGateway {
    backend: Box<dyn LlmBackend>,
    log: Mutex<Vec<CallRecord>>,
    calls_by_phase: [AtomicUsize; 5],
}

impl fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmGateway")
            .field("network", &self.backend.is_network())
            .finish()
    }
}

impl LlmGateway {
    pub fn new(backend: Box<dyn LlmBackend>) -> Self {
        Self {
            backend,
            log: Mutex::new(Vec::new()),
            calls_by_phase: Default::default(),
        }
    }

    pub fn mock(backend: MockBackend) -> Self {
        Self::new(Box::new(backend))
    }

    pub fn uses_network(&self) -> bool {
        self.backend.is_network()
    }

    /// Number of `complete` invocations (not attempts) for `phase`.
    pub fn calls_in_phase(&self, phase: Phase) -> usize {
        self.calls_by_phase[phase as usize].load(Ordering::SeqCst)
    }

    /// Drains the audit log, sorted by `(step_key, role_tag, attempt)` so
    /// concurrent callers still produce a deterministic log.
    pub fn take_log(&self) -> Vec<CallRecord> {
        let mut log = std::mem::take(&mut *self.log.lock().expect("log poisoned"));
        log.sort_by(|a, b| {
            (&a.step_key, &a.role_tag, a.attempt).cmp(&(&b.step_key, &b.role_tag, b.attempt))
        });
        log
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<ValidatedOutput, GatewayError> {
        if !(0.0..=2.0).contains(&request.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                request.temperature
            )));
        }
        self.calls_by_phase[request.step_key.phase as usize].fetch_add(1, Ordering::SeqCst);
        let schema = &request.output_schema;
        let mut user_prompt = request.user_prompt.clone();
        let mut last_error = String::new();
        for attempt in 0..=request.max_retries {
            let mut record = CallRecord {
                role_tag: request.role_tag.clone(),
                step_key: request.step_key.to_string(),
                attempt,
                schema: schema.id(),
                temperature: request.temperature,
                system_prompt: request.system_prompt.clone(),
                user_prompt: user_prompt.clone(),
                response: None,
                error: None,
            };
            let raw = match self.backend.generate(request, &user_prompt) {
                Ok(raw) => raw,
                Err(e) => {
                    record.error = Some(e.to_string());
                    self.push(record);
                    return Err(e);
                }
            };
            record.response = Some(raw.clone());
            match extract_json(&raw).and_then(|v| schema.validate(&v)) {
                Ok(fields) => {
                    self.push(record);
                    return Ok(ValidatedOutput {
                        schema: schema.id(),
                        fields,
                        raw_text: raw,
                    });
                }
                Err(e) => {
                    log::debug!(
                        "{} {} attempt {attempt} failed validation: {e}",
                        request.role_tag,
                        request.step_key
                    );
                    record.error = Some(e.clone());
                    self.push(record);
                    user_prompt = format!(
                        "{}\n\nYour previous response was rejected: {e}. {}",
                        request.user_prompt,
                        schema.instructions()
                    );
                    last_error = e;
                }
            }
        }
        Err(GatewayError::SchemaViolationAfterRetries {
            schema: schema.id(),
            attempts: request.max_retries + 1,
            last_error,
        })
    }

    fn push(&self, record: CallRecord) {
        self.log.lock().expect("log poisoned").push(record);
    }
}

/// Convenience for building normalized aspect maps out of validated fields.
pub fn aspect_entries(value: &Value) -> BTreeMap<Aspect, AspectText> {
    value
        .as_object()
        .map(|m| {
            m.iter()
                .filter_map(|(k, v)| Some((Aspect::parse(k)?, AspectText::from_json(v)?)))
                .collect()
        })
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn entry(role: &str, key: &str, response: &str) -> MockScriptEntry {
        MockScriptEntry {
            role_tag: role.into(),
            step_key: key.into(),
            response: response.into(),
        }
    }

    fn decision_request(max_retries: u32) -> CompletionRequest {
        CompletionRequest {
            role_tag: "manager".into(),
            step_key: StepKey::new("1", d("2023-01-05"), Phase::Decide),
            system_prompt: "sys".into(),
            user_prompt: "decide".into(),
            output_schema: OutputSchema::Decision {
                tickers: vec!["TSLA".into()],
            },
            temperature: TRADING_TEMPERATURE,
            max_retries,
        }
    }

    #[test]
    fn step_key_round_trip() {
        let key = StepKey::new("test", d("2022-11-01"), Phase::BeliefUpdate);
        assert_eq!(key.to_string(), "test:2022-11-01:belief_update");
        assert_eq!(StepKey::parse(&key.to_string()), Some(key));
        assert_eq!(StepKey::parse("1:2022-11-01:trade"), None);
        assert_eq!(StepKey::parse(":2022-11-01:decide"), None);
    }

    #[test]
    fn scripted_long() {
        let mock = MockBackend::from_entries([entry(
            "manager",
            "1:2023-01-05:decide",
            r#"{"action":"long"}"#,
        )])
        .unwrap();
        let gw = LlmGateway::mock(mock);
        let out = gw.complete(&decision_request(2)).unwrap();
        assert_eq!(out.fields["actions"]["TSLA"], "long");
        assert_eq!(out.schema, "decision");
    }

    #[test]
    fn buy_is_rejected_after_retries() {
        let mock = MockBackend::from_entries([entry(
            "manager",
            "1:2023-01-05:decide",
            r#"{"action":"buy"}"#,
        )])
        .unwrap();
        let gw = LlmGateway::mock(mock);
        let err = gw.complete(&decision_request(1)).unwrap_err();
        assert!(matches!(
            err,
            GatewayError::SchemaViolationAfterRetries { attempts: 2, .. }
        ));
        let log = gw.take_log();
        assert_eq!(log.len(), 2);
        assert!(log[1].user_prompt.contains("`buy`"));
    }

    #[test]
    fn missing_entry_is_an_error() {
        let gw = LlmGateway::mock(MockBackend::default());
        assert!(matches!(
            gw.complete(&decision_request(2)),
            Err(GatewayError::MissingScriptEntry { .. })
        ));
    }

    #[test]
    fn duplicate_script_entry() {
        let err = MockBackend::from_entries([
            entry("manager", "1:2023-01-05:decide", "{}"),
            entry("manager", "1:2023-01-05:decide", "{}"),
        ])
        .unwrap_err();
        assert!(matches!(err, GatewayError::SchemaError { line: 2, .. }));
    }

    #[test]
    fn script_file_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        let lines: Vec<String> = (1..=4)
            .map(|i| {
                serde_json::to_string(&entry(
                    "manager",
                    &format!("1:2023-01-0{i}:decide"),
                    r#"{"action":"neutral"}"#,
                ))
                .unwrap()
            })
            .collect();
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert_eq!(load_mock_script(&path).unwrap().len(), 4);
        std::fs::write(&path, "{\"role_tag\": 1}").unwrap();
        assert!(matches!(
            load_mock_script(&path),
            Err(GatewayError::SchemaError { line: 1, .. })
        ));
    }

    #[test]
    fn unreachable_endpoint() {
        let backend = HttpBackend::new(HttpSettings {
            endpoint: "http://127.0.0.1:9".into(),
            api_key: None,
            model: "m".into(),
            timeout: Duration::from_secs(2),
            min_interval: Duration::ZERO,
            seed: None,
        })
        .unwrap();
        let gw = LlmGateway::new(Box::new(backend));
        let started = Instant::now();
        let err = gw.complete(&decision_request(2)).unwrap_err();
        assert!(
            matches!(err, GatewayError::BackendUnavailable(_) | GatewayError::Timeout(_)),
            "{err:?}"
        );
        assert!(started.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn json_extraction_tolerates_fences() {
        let v = extract_json("```json\n{\"reflection\": \"ok\"}\n```").unwrap();
        assert_eq!(v["reflection"], "ok");
        assert!(extract_json("no json").is_err());
    }

    #[test]
    fn distillation_forms() {
        let one = OutputSchema::Distillation {
            tickers: vec!["A".into()],
        };
        let v = one
            .validate(&json!({"insight": "up", "sentiment": "positive"}))
            .unwrap();
        assert_eq!(v["A"]["sentiment"], "positive");
        let two = OutputSchema::Distillation {
            tickers: vec!["A".into(), "B".into()],
        };
        assert!(two
            .validate(&json!({"A": {"insight": "x", "sentiment": "neutral"}}))
            .unwrap_err()
            .contains("`B`"));
        assert!(one
            .validate(&json!({"insight": "x", "sentiment": "bullish"}))
            .is_err());
    }

    #[test]
    fn aspect_vocabulary_enforced() {
        let s = OutputSchema::Conceptualization;
        assert!(s
            .validate(&json!({"insights": {"historical momentum": "ride trends"}}))
            .is_ok());
        assert!(s
            .validate(&json!({"insights": {"astrology": "no"}}))
            .unwrap_err()
            .contains("astrology"));
        assert!(s
            .validate(&json!({"insights": {"other aspects": ["sector trends"]}}))
            .is_ok());
    }

    #[test]
    fn temperature_bounds() {
        let gw = LlmGateway::mock(MockBackend::default());
        let mut req = decision_request(0);
        req.temperature = 2.5;
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
    }
}
