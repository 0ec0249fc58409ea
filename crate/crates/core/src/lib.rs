//! Hierarchical manager-analyst trading engine.
//!
//! Analysts distill one information source each, a single manager turns their
//! insights into trading directions (and, for portfolios, mean-variance
//! weights), and a risk-control component watches the daily CVaR within an
//! episode and rewrites the investment beliefs between training episodes.
//! Every language-model call goes through [`llm_gateway`], which also offers a
//! scripted backend for offline, bit-reproducible runs.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod agents;
pub mod backtest;
pub mod beliefs;
pub mod config;
pub mod data_ingest;
pub mod llm_gateway;
pub mod memory;
pub mod portfolio;
pub mod risk_control;
pub mod synthetic;

/// Stable identifier of an agent node, e.g. `manager` or `news_analyst`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub String);

impl AgentId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Trading direction for one asset. Constrains its portfolio weight to
/// `[0, 1]` (long), `[-1, 0]` (short) or `{0}` (neutral).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Long,
    Short,
    Neutral,
}

impl Direction {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "long" => Some(Direction::Long),
            "short" => Some(Direction::Short),
            "neutral" => Some(Direction::Neutral),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Long => "long",
            Direction::Short => "short",
            Direction::Neutral => "neutral",
        }
    }

    /// Unit position: +1, -1 or 0.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Long => 1.0,
            Direction::Short => -1.0,
            Direction::Neutral => 0.0,
        }
    }

    /// Weight box `(lo, hi)` implied by the direction.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Direction::Long => (0.0, 1.0),
            Direction::Short => (-1.0, 0.0),
            Direction::Neutral => (0.0, 0.0),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Episode label: a 1-based training episode or the single test pass.
/// Serialized as `"3"` or `"test"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Episode {
    Train(u32),
    Test,
}

impl Episode {
    pub fn train_index(self) -> Option<u32> {
        match self {
            Episode::Train(k) => Some(k),
            Episode::Test => None,
        }
    }
}

impl fmt::Display for Episode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Episode::Train(k) => write!(f, "{k}"),
            Episode::Test => f.write_str("test"),
        }
    }
}

impl From<Episode> for String {
    fn from(e: Episode) -> Self {
        e.to_string()
    }
}

impl TryFrom<String> for Episode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s == "test" {
            return Ok(Episode::Test);
        }
        s.parse::<u32>()
            .ok()
            .filter(|k| *k >= 1)
            .map(Episode::Train)
            .ok_or_else(|| format!("invalid episode label `{s}`"))
    }
}
