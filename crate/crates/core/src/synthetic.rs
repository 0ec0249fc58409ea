//! Synthetic market fixtures and complete mock scripts for offline runs.
//!
//! [`write_fixture`] lays out price CSVs, a document corpus and a run config
//! in a directory. [`build_mock_script`] walks the same calendar the engine
//! will walk and emits one scripted response for every call the engine can
//! make, with trading directions supplied by a caller-provided policy. Entries
//! for calls that end up not being made (for example reflections on days
//! without an alert) are simply never read.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::agents::AgentRole;
use crate::backtest::{BacktestError, Session};
use crate::data_ingest::assemble_observation;
use crate::llm_gateway::{MockScriptEntry, Phase, StepKey};
use crate::risk_control::RISK_CONTROL_ROLE;
use crate::{Direction, Episode};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub tickers: Vec<String>,
    pub start: NaiveDate,
    /// Trading days in the training range.
    pub train_days: usize,
    /// Trading days in the test range (0 for none).
    pub test_days: usize,
    pub seed: u64,
    /// Probability of a news item per ticker and day.
    pub news_rate: f64,
    pub daily_vol: f64,
    pub max_episodes: u32,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            tickers: vec!["TSLA".into()],
            start: NaiveDate::from_ymd_opt(2022, 10, 3).expect("valid date"),
            train_days: 50,
            test_days: 0,
            seed: 7,
            news_rate: 0.6,
            daily_vol: 0.02,
            max_episodes: 4,
        }
    }
}

/// Weekdays starting at `start` (holidays are not modeled).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

const HEADLINES: [(&str, &str); 6] = [
    ("{t} shares climb as delivery numbers beat estimates", "positive"),
    ("{t} announces expansion of production capacity", "positive"),
    ("Analysts raise price target on {t} after strong demand", "positive"),
    ("{t} faces regulatory probe over product safety", "negative"),
    ("{t} cuts prices amid slowing demand", "negative"),
    ("{t} executive departure raises succession questions", "negative"),
];

/// Writes `prices/<TICKER>.csv`, `documents.jsonl` and `config.json` into
/// `dir` and returns the config path.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> io::Result<PathBuf> {
    fs::create_dir_all(dir.join("prices"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let days = business_days(spec.start, spec.train_days + spec.test_days);
    let mut docs = String::new();
    let mut prices = Map::new();

    for (n, ticker) in spec.tickers.iter().enumerate() {
        let mut csv = String::from("date,open,high,low,close,adj_close,volume\n");
        let mut close: f64 = 100.0 + 20.0 * n as f64;
        for (i, day) in days.iter().enumerate() {
            let open = close;
            if i > 0 {
                let shock: f64 = rng.gen_range(-1.0..1.0);
                close = (close * (spec.daily_vol * 1.7 * shock + 0.0005).exp() * 100.0).round() / 100.0;
            }
            let high = open.max(close) * 1.004;
            let low = open.min(close) * 0.996;
            let volume: u64 = rng.gen_range(1_000_000..5_000_000);
            csv.push_str(&format!(
                "{day},{open:.2},{high:.2},{low:.2},{close:.2},{close:.2},{volume}\n"
            ));
            if rng.gen_bool(spec.news_rate) {
                let (template, _) = HEADLINES[rng.gen_range(0..HEADLINES.len())];
                docs.push_str(&doc_line(&format!("{ticker}-news-{i}"), ticker, "news", *day, &template.replace("{t}", ticker)));
            }
            match i % 25 {
                5 => docs.push_str(&doc_line(
                    &format!("{ticker}-10q-{i}"),
                    ticker,
                    "form10q",
                    *day,
                    &format!("{ticker} quarterly report: revenue up, operating margin narrowed, inventory rising."),
                )),
                12 => docs.push_str(&doc_line(
                    &format!("{ticker}-ecc-{i}"),
                    ticker,
                    "ecc_transcript",
                    *day,
                    &format!("{ticker} earnings call: management guides to steady growth and cost discipline."),
                )),
                20 => docs.push_str(&doc_line(
                    &format!("{ticker}-10k-{i}"),
                    ticker,
                    "form10k",
                    *day,
                    &format!("{ticker} annual report: long-term strategy, risk factors include competition."),
                )),
                _ => {}
            }
        }
        let path = format!("prices/{ticker}.csv");
        fs::write(dir.join(&path), csv)?;
        prices.insert(ticker.clone(), Value::String(path));
    }
    fs::write(dir.join("documents.jsonl"), docs)?;

    let train_end = days[spec.train_days - 1];
    let mut run = json!({
        "tickers": spec.tickers,
        "trading_mode": if spec.tickers.len() == 1 { "single_stock" } else { "portfolio" },
        "train_start": days[0],
        "train_end": train_end,
        "max_episodes": spec.max_episodes,
        "capital": 100000.0,
    });
    if spec.test_days > 0 {
        run["test_start"] = json!(days[spec.train_days]);
        run["test_end"] = json!(days[days.len() - 1]);
    }
    let mut analysts = vec!["news_analyst", "filing10k_analyst", "filing10q_analyst", "ecc_analyst", "data_analyst"];
    if spec.tickers.len() > 1 {
        analysts.push("selection_analyst");
    }
    let config = json!({
        "run": run,
        "data": { "prices": prices, "documents": ["documents.jsonl"], "momentum_window": 5 },
        "agents": { "analysts": analysts },
        "portfolio": { "estimation_window": 20 },
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).expect("json") + "\n")?;
    Ok(path)
}

fn doc_line(id: &str, ticker: &str, kind: &str, day: NaiveDate, body: &str) -> String {
    let v = json!({ "doc_id": id, "ticker": ticker, "kind": kind, "published": day, "body": body });
    format!("{v}\n")
}

/// Direction chosen by the scripted manager for `(episode, decision index, ticker)`.
pub type ScriptPolicy<'a> = dyn Fn(Episode, usize, &str) -> Direction + 'a;

fn entry(role: &str, key: &StepKey, response: Value) -> MockScriptEntry {
    MockScriptEntry {
        role_tag: role.to_string(),
        step_key: key.to_string(),
        response: response.to_string(),
    }
}

fn sentiment_for(body: &str) -> &'static str {
    HEADLINES
        .iter()
        .find(|(t, _)| {
            let stem = t.replace("{t} ", "").replace(" {t}", "");
            body.contains(&stem)
        })
        .map(|(_, s)| *s)
        .unwrap_or("neutral")
}

/// Script entries for every call an engine run over `session` can make:
/// training episodes `1..=max_episodes` and, when a test range is
/// configured, the test pass.
pub fn build_mock_script(session: &Session, policy: &ScriptPolicy<'_>) -> Result<Vec<MockScriptEntry>, BacktestError> {
    let config = &session.config;
    let tickers = &config.run.tickers;
    let mut stages: Vec<(Episode, Vec<NaiveDate>)> = Vec::new();
    let train = session.train_dates()?;
    for k in 1..=config.run.max_episodes {
        stages.push((Episode::Train(k), train.clone()));
    }
    if config.run.test_start.is_some() {
        stages.push((Episode::Test, session.test_dates()?));
    }

    let mut out = Vec::new();
    for (episode, dates) in &stages {
        let ep = episode.to_string();
        let decision_days = &dates[..dates.len() - 1];
        for (i, date) in decision_days.iter().enumerate() {
            let obs = assemble_observation(*date, tickers, &session.market)?;
            for role in &config.agents.analysts {
                let Some(kind) = role.doc_kind() else { continue };
                let mut per_ticker = Map::new();
                for (ticker, t) in &obs.tickers {
                    let docs = t.documents_of(kind);
                    if docs.is_empty() {
                        continue;
                    }
                    let sentiment = sentiment_for(&docs[0].body);
                    per_ticker.insert(
                        ticker.clone(),
                        json!({
                            "insight": format!("{ticker}: {} ({} item(s))", docs[0].body, docs.len()),
                            "sentiment": sentiment,
                            "cited_memory_ids": [],
                        }),
                    );
                }
                if !per_ticker.is_empty() {
                    let key = StepKey::new(ep.clone(), *date, Phase::Analyze);
                    out.push(entry(role.agent_id().as_str(), &key, Value::Object(per_ticker)));
                }
            }
            let actions: Map<String, Value> = tickers
                .iter()
                .map(|t| (t.clone(), json!(policy(*episode, i, t).as_str())))
                .collect();
            let contributions: Map<String, Value> = config
                .agents
                .analysts
                .iter()
                .map(|r| (r.agent_id().to_string(), json!("considered")))
                .collect();
            let manager = AgentRole::Manager.agent_id();
            out.push(entry(
                manager.as_str(),
                &StepKey::new(ep.clone(), *date, Phase::Decide),
                json!({
                    "actions": actions,
                    "reasoning": format!("Scripted decision {i} of episode {ep}."),
                    "contributions": contributions,
                }),
            ));
            out.push(entry(
                manager.as_str(),
                &StepKey::new(ep.clone(), *date, Phase::Reflect),
                json!({ "reflection": format!("On {date} the position lost ground; size down until momentum confirms.") }),
            ));
        }

        let Episode::Train(k) = episode else { continue };
        let last = *decision_days.last().expect("at least one decision day");
        out.push(entry(
            RISK_CONTROL_ROLE,
            &StepKey::new(ep.clone(), last, Phase::Conceptualize),
            json!({ "insights": {
                "historical momentum": format!("Episode {k}: follow multi-day momentum instead of single-day moves."),
                "news insights": ["Delivery and demand headlines preceded gains.", "Regulatory news preceded losses."],
                "Form 10-Q": "Rising inventory flagged weaker quarters.",
                "other aspects": "Losses clustered after consecutive alerts.",
            }}),
        ));
        if *k >= 2 {
            let key = StepKey::new(ep.clone(), last, Phase::BeliefUpdate);
            out.push(entry(
                RISK_CONTROL_ROLE,
                &key,
                json!({
                    "meta_prompt": {
                        "historical momentum": "Weight momentum more heavily than in the losing episode.",
                        "news insights": "Trust demand-related headlines; discount one-off regulatory noise.",
                        "Form 10-Q": "Treat inventory build-up as a bearish signal.",
                        "other aspects": "Reduce exposure after consecutive losses.",
                    },
                    "reasoning": format!("Episode comparison {}/{k}.", k - 1),
                }),
            ));
            out.push(entry(
                AgentRole::Manager.agent_id().as_str(),
                &key,
                json!({ "beliefs": {
                    "historical momentum": format!("(update {}) Positive multi-day momentum favours long positions.", k - 1),
                    "news insights": "Demand headlines are reliable; regulatory headlines fade quickly.",
                    "Form 10-Q": "Inventory build-up in quarterly filings signals downside.",
                    "other aspects": "After two losing days, scale down risk.",
                }}),
            ));
        }
    }
    Ok(out)
}

pub fn write_mock_script(path: &Path, entries: &[MockScriptEntry]) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for e in entries {
        writeln!(out, "{}", serde_json::to_string(e).expect("entry serializes"))?;
    }
    out.flush()
}
