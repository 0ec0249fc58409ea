//! Layered agent memory with top-K retrieval.
//!
//! Each event is ranked by `gamma = relevancy + importance`, where relevancy is
//! the cosine similarity between the query and event embeddings and importance
//! is `v * decay^dt + access_bonus` with `dt` counted in trading days. Both raw
//! components are min-max scaled to `[0, 1]` over the candidate set before they
//! are summed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::RwLock;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data_ingest::{DocKind, TradingCalendar};
use crate::AgentId;

pub const ACCESS_BOOST: f64 = 5.0;
pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_INITIAL_IMPORTANCE: f64 = 0.5;
pub const HASH_EMBEDDING_DIM: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("zero-length vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("event created {created} is after query date {as_of}")]
    FutureEvent { created: NaiveDate, as_of: NaiveDate },
    #[error("unknown memory event `{0}`")]
    UnknownEventId(String),
    #[error("duplicate memory event `{0}`")]
    DuplicateEventId(String),
    #[error("invalid memory event `{id}`: {reason}")]
    InvalidEvent { id: String, reason: String },
    #[error("snapshot {path}: {detail}")]
    Snapshot { path: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryLayer {
    Working,
    Procedural,
    Episodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEvent {
    pub event_id: String,
    pub owner: AgentId,
    pub layer: MemoryLayer,
    pub content: String,
    pub embedding: Vec<f64>,
    pub initial_importance: f64,
    pub decay_ratio: f64,
    pub created_at: NaiveDate,
    pub access_bonus: f64,
}

impl MemoryEvent {
    fn validate(&self, dimension: usize) -> Result<(), MemoryError> {
        let bad = |reason: &str| MemoryError::InvalidEvent {
            id: self.event_id.clone(),
            reason: reason.to_string(),
        };
        if !(self.decay_ratio > 0.0 && self.decay_ratio < 1.0) {
            return Err(bad("decay_ratio must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.initial_importance) {
            return Err(bad("initial_importance must lie in [0, 1]"));
        }
        if !(self.access_bonus >= 0.0) {
            return Err(bad("access_bonus must be non-negative"));
        }
        if self.embedding.len() != dimension {
            return Err(MemoryError::DimensionMismatch {
                expected: dimension,
                actual: self.embedding.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQuery {
    pub query_text: String,
    pub embedding: Vec<f64>,
    pub as_of: NaiveDate,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEvent {
    pub event: MemoryEvent,
    pub relevancy: f64,
    pub importance: f64,
    pub gamma: f64,
}

/// Decay ratios per source kind, per trading day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecayConfig {
    pub news: f64,
    pub ecc_transcript: f64,
    pub form10q: f64,
    pub form10k: f64,
    pub analyst_report: f64,
    /// Used for events not tied to a document kind (manager reasoning,
    /// reflections, indicator summaries).
    pub other: f64,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            news: 0.90,
            ecc_transcript: 0.97,
            form10q: 0.97,
            form10k: 0.99,
            analyst_report: 0.95,
            other: 0.95,
        }
    }
}

impl DecayConfig {
    pub fn for_kind(&self, kind: Option<DocKind>) -> f64 {
        match kind {
            Some(DocKind::News) => self.news,
            Some(DocKind::EccTranscript) => self.ecc_transcript,
            Some(DocKind::Form10q) => self.form10q,
            Some(DocKind::Form10k) => self.form10k,
            Some(DocKind::AnalystReport) => self.analyst_report,
            None => self.other,
        }
    }
}

pub fn relevancy_score(query_emb: &[f64], event_emb: &[f64]) -> Result<f64, MemoryError> {
    if query_emb.len() != event_emb.len() {
        return Err(MemoryError::DimensionMismatch {
            expected: query_emb.len(),
            actual: event_emb.len(),
        });
    }
    let dot: f64 = query_emb.iter().zip(event_emb).map(|(a, b)| a * b).sum();
    let na = query_emb.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = event_emb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MemoryError::ZeroVector);
    }
    Ok(dot / (na * nb))
}

/// `v * decay^dt + bonus` for an age of `dt` trading days.
pub fn decayed_importance(event: &MemoryEvent, dt: u32) -> f64 {
    event.initial_importance * event.decay_ratio.powi(dt as i32) + event.access_bonus
}

pub fn importance_score(
    event: &MemoryEvent,
    as_of: NaiveDate,
    calendar: &TradingCalendar,
) -> Result<f64, MemoryError> {
    if as_of < event.created_at {
        return Err(MemoryError::FutureEvent {
            created: event.created_at,
            as_of,
        });
    }
    let dt = calendar.trading_days_between(event.created_at, as_of);
    Ok(decayed_importance(event, dt))
}

fn min_max_scale(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
}

/// Maps text to a fixed-length vector.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Signed feature hashing of lower-cased word tokens into 64 buckets using
/// SHA-256, so vectors are identical on every platform. Texts sharing words
/// get positive cosine similarity.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder;

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        HASH_EMBEDDING_DIM
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; HASH_EMBEDDING_DIM];
        let mut add = |token: &[u8]| {
            let digest = Sha256::digest(token);
            let bucket = u16::from_le_bytes([digest[0], digest[1]]) as usize % HASH_EMBEDDING_DIM;
            let sign = if digest[2] & 1 == 0 { 1.0 } else { -1.0 };
            let weight = 1.0 + f64::from(digest[3]) / 255.0;
            v[bucket] += sign * weight;
        };
        let lowered = text.to_lowercase();
        let mut any = false;
        for token in lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            add(token.as_bytes());
            any = true;
        }
        if !any {
            add(text.as_bytes());
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        v
    }
}

#[derive(Debug, Default)]
struct Inner {
    events: BTreeMap<String, MemoryEvent>,
}

/// Shared store for every agent's events; retrieval only ever looks at the
/// querying agent's own events.
#[derive(Debug)]
pub struct MemoryStore {
    dimension: usize,
    calendar: TradingCalendar,
    inner: RwLock<Inner>,
}

impl MemoryStore {
    pub fn new(dimension: usize, calendar: TradingCalendar) -> Self {
        Self {
            dimension,
            calendar,
            inner: RwLock::new(Inner::default()),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn calendar(&self) -> &TradingCalendar {
        &self.calendar
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("memory lock poisoned").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, event: MemoryEvent) -> Result<(), MemoryError> {
        event.validate(self.dimension)?;
        let mut inner = self.inner.write().expect("memory lock poisoned");
        if inner.events.contains_key(&event.event_id) {
            return Err(MemoryError::DuplicateEventId(event.event_id));
        }
        inner.events.insert(event.event_id.clone(), event);
        Ok(())
    }

    /// Inserts unless an event with the same id already exists. Returns whether
    /// the event was added.
    pub fn insert_if_absent(&self, event: MemoryEvent) -> Result<bool, MemoryError> {
        event.validate(self.dimension)?;
        let mut inner = self.inner.write().expect("memory lock poisoned");
        if inner.events.contains_key(&event.event_id) {
            return Ok(false);
        }
        inner.events.insert(event.event_id.clone(), event);
        Ok(true)
    }

    pub fn get(&self, event_id: &str) -> Option<MemoryEvent> {
        self.inner
            .read()
            .expect("memory lock poisoned")
            .events
            .get(event_id)
            .cloned()
    }

    pub fn contains(&self, event_id: &str) -> bool {
        self.inner
            .read()
            .expect("memory lock poisoned")
            .events
            .contains_key(event_id)
    }

    pub fn boost_access(&self, event_id: &str) -> Result<f64, MemoryError> {
        let mut inner = self.inner.write().expect("memory lock poisoned");
        let event = inner
            .events
            .get_mut(event_id)
            .ok_or_else(|| MemoryError::UnknownEventId(event_id.to_string()))?;
        event.access_bonus += ACCESS_BOOST;
        Ok(event.access_bonus)
    }

    pub fn events_of(&self, owner: &AgentId) -> Vec<MemoryEvent> {
        self.inner
            .read()
            .expect("memory lock poisoned")
            .events
            .values()
            .filter(|e| &e.owner == owner)
            .cloned()
            .collect()
    }

    pub fn retrieve_top_k(
        &self,
        owner: &AgentId,
        query: &MemoryQuery,
    ) -> Result<Vec<ScoredEvent>, MemoryError> {
        if query.embedding.len() != self.dimension {
            return Err(MemoryError::DimensionMismatch {
                expected: self.dimension,
                actual: query.embedding.len(),
            });
        }
        let inner = self.inner.read().expect("memory lock poisoned");
        let candidates: Vec<&MemoryEvent> = inner
            .events
            .values()
            .filter(|e| &e.owner == owner && e.created_at <= query.as_of)
            .collect();
        if candidates.is_empty() || query.k == 0 {
            return Ok(Vec::new());
        }

        let mut relevancy = candidates
            .iter()
            .map(|e| relevancy_score(&query.embedding, &e.embedding))
            .collect::<Result<Vec<_>, _>>()?;
        let mut importance = candidates
            .iter()
            .map(|e| importance_score(e, query.as_of, &self.calendar))
            .collect::<Result<Vec<_>, _>>()?;
        min_max_scale(&mut relevancy);
        min_max_scale(&mut importance);

        let mut scored: Vec<(usize, f64)> = relevancy
            .iter()
            .zip(&importance)
            .map(|(r, i)| r + i)
            .enumerate()
            .collect();
        scored.sort_by(|(ia, ga), (ib, gb)| {
            let (a, b) = (candidates[*ia], candidates[*ib]);
            gb.total_cmp(ga)
                .then_with(|| b.created_at.cmp(&a.created_at))
                .then_with(|| a.event_id.cmp(&b.event_id))
        });
        scored.truncate(query.k);
        Ok(scored
            .into_iter()
            .map(|(i, gamma)| ScoredEvent {
                event: candidates[i].clone(),
                relevancy: relevancy[i],
                importance: importance[i],
                gamma,
            })
            .collect())
    }

    /// Writes one event per line, ordered by event id.
    pub fn save_snapshot(&self, path: &Path) -> Result<(), MemoryError> {
        let err = |e: std::io::Error| MemoryError::Snapshot {
            path: path.display().to_string(),
            detail: e.to_string(),
        };
        let inner = self.inner.read().expect("memory lock poisoned");
        let mut out = BufWriter::new(File::create(path).map_err(err)?);
        for event in inner.events.values() {
            let line = serde_json::to_string(event).expect("memory event serializes");
            writeln!(out, "{line}").map_err(err)?;
        }
        out.flush().map_err(err)
    }

    pub fn load_snapshot(
        path: &Path,
        dimension: usize,
        calendar: TradingCalendar,
    ) -> Result<Self, MemoryError> {
        let snap_err = |detail: String| MemoryError::Snapshot {
            path: path.display().to_string(),
            detail,
        };
        let file = File::open(path).map_err(|e| snap_err(e.to_string()))?;
        let store = Self::new(dimension, calendar);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| snap_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let event: MemoryEvent = serde_json::from_str(&line)
                .map_err(|e| snap_err(format!("line {}: {e}", i + 1)))?;
            store.insert(event)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn calendar() -> TradingCalendar {
        let start = d("2023-01-01");
        TradingCalendar::new((0..30).map(|i| start + chrono::Days::new(i)).collect())
    }

    fn event(id: &str, v: f64, theta: f64, created: &str, emb: Vec<f64>) -> MemoryEvent {
        MemoryEvent {
            event_id: id.into(),
            owner: AgentId::from("news_analyst"),
            layer: MemoryLayer::Procedural,
            content: id.into(),
            embedding: emb,
            initial_importance: v,
            decay_ratio: theta,
            created_at: d(created),
            access_bonus: 0.0,
        }
    }

    #[test]
    fn cosine_cases() {
        assert!((relevancy_score(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(relevancy_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let r = relevancy_score(&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((r - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(relevancy_score(&[0.0, 0.0], &[1.0, 0.0]), Err(MemoryError::ZeroVector));
        assert!(matches!(
            relevancy_score(&[1.0], &[1.0, 0.0]),
            Err(MemoryError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn importance_cases() {
        let cal = calendar();
        let e = event("a", 1.0, 0.9, "2023-01-05", vec![1.0]);
        assert_eq!(importance_score(&e, d("2023-01-05"), &cal).unwrap(), 1.0);
        let e = event("b", 0.8, 0.9, "2023-01-05", vec![1.0]);
        assert!((importance_score(&e, d("2023-01-07"), &cal).unwrap() - 0.648).abs() < 1e-15);
        let mut e = event("c", 0.3, 0.9, "2023-01-05", vec![1.0]);
        e.access_bonus = 5.0;
        assert!((importance_score(&e, d("2023-01-05"), &cal).unwrap() - 5.3).abs() < 1e-15);
        assert!(matches!(
            importance_score(&e, d("2023-01-04"), &cal),
            Err(MemoryError::FutureEvent { .. })
        ));
    }

    #[test]
    fn boost_is_cumulative() {
        let store = MemoryStore::new(1, calendar());
        store.insert(event("a", 0.5, 0.9, "2023-01-05", vec![1.0])).unwrap();
        assert_eq!(store.boost_access("a").unwrap(), 5.0);
        assert_eq!(store.boost_access("a").unwrap(), 10.0);
        assert_eq!(
            store.boost_access("zz"),
            Err(MemoryError::UnknownEventId("zz".into()))
        );
    }

    #[test]
    fn rejects_invalid_events() {
        let store = MemoryStore::new(1, calendar());
        assert!(store.insert(event("a", 0.5, 1.0, "2023-01-05", vec![1.0])).is_err());
        assert!(store.insert(event("a", 1.5, 0.9, "2023-01-05", vec![1.0])).is_err());
        assert!(store.insert(event("a", 0.5, 0.9, "2023-01-05", vec![1.0, 2.0])).is_err());
        store.insert(event("a", 0.5, 0.9, "2023-01-05", vec![1.0])).unwrap();
        assert_eq!(
            store.insert(event("a", 0.5, 0.9, "2023-01-05", vec![1.0])),
            Err(MemoryError::DuplicateEventId("a".into()))
        );
    }

    #[test]
    fn empty_store_and_lookahead_filter() {
        let store = MemoryStore::new(2, calendar());
        let q = MemoryQuery {
            query_text: "q".into(),
            embedding: vec![1.0, 0.0],
            as_of: d("2023-01-05"),
            k: 5,
        };
        let owner = AgentId::from("news_analyst");
        assert!(store.retrieve_top_k(&owner, &q).unwrap().is_empty());
        store.insert(event("old", 0.5, 0.9, "2023-01-04", vec![1.0, 0.0])).unwrap();
        store.insert(event("future", 0.5, 0.9, "2023-01-09", vec![1.0, 0.0])).unwrap();
        let mut other = event("other", 0.5, 0.9, "2023-01-04", vec![1.0, 0.0]);
        other.owner = AgentId::from("manager");
        store.insert(other).unwrap();
        let ids: Vec<_> = store
            .retrieve_top_k(&owner, &q)
            .unwrap()
            .into_iter()
            .map(|s| s.event.event_id)
            .collect();
        assert_eq!(ids, ["old"]);
    }

    #[test]
    fn degenerate_scaling_uses_half() {
        let store = MemoryStore::new(2, calendar());
        store.insert(event("b", 0.5, 0.9, "2023-01-04", vec![1.0, 0.0])).unwrap();
        store.insert(event("a", 0.5, 0.9, "2023-01-04", vec![1.0, 0.0])).unwrap();
        store.insert(event("c", 0.5, 0.9, "2023-01-05", vec![1.0, 0.0])).unwrap();
        let q = MemoryQuery {
            query_text: String::new(),
            embedding: vec![2.0, 0.0],
            as_of: d("2023-01-05"),
            k: 3,
        };
        let out = store.retrieve_top_k(&AgentId::from("news_analyst"), &q).unwrap();
        // relevancy identical -> 0.5 each; "c" is newest and least decayed.
        assert_eq!(out[0].event.event_id, "c");
        assert_eq!(out[0].gamma, 1.5);
        // a and b tie exactly; lexicographic id breaks it.
        assert_eq!(out[1].event.event_id, "a");
        assert_eq!(out[2].event.event_id, "b");
        assert_eq!(out[1].gamma, 0.5);
    }

    #[test]
    fn hash_embedder_is_stable_and_nonzero() {
        let e = HashEmbedder;
        let a = e.embed("Revenue beat expectations");
        assert_eq!(a.len(), 64);
        assert_eq!(a, e.embed("revenue BEAT expectations"));
        assert!(a.iter().any(|x| *x != 0.0));
        assert!(e.embed("").iter().any(|x| *x != 0.0));
        let b = e.embed("revenue growth");
        assert!(relevancy_score(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn snapshot_round_trip() {
        let store = MemoryStore::new(2, calendar());
        store.insert(event("a", 0.5, 0.9, "2023-01-04", vec![0.1, 0.7])).unwrap();
        store.boost_access("a").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.jsonl");
        store.save_snapshot(&path).unwrap();
        let back = MemoryStore::load_snapshot(&path, 2, calendar()).unwrap();
        assert_eq!(back.get("a"), store.get("a"));
    }
}
