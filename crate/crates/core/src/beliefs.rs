//! Investment-belief vocabulary shared by the manager prompt, the
//! conceptualization step and the belief rewrite.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Aspect {
    #[serde(rename = "historical momentum")]
    HistoricalMomentum,
    #[serde(rename = "news insights")]
    NewsInsights,
    #[serde(rename = "Form 10-Q")]
    Form10q,
    #[serde(rename = "Form 10-K")]
    Form10k,
    #[serde(rename = "ECC")]
    Ecc,
    #[serde(rename = "other aspects")]
    OtherAspects,
}

impl Aspect {
    pub const ALL: [Aspect; 6] = [
        Aspect::HistoricalMomentum,
        Aspect::NewsInsights,
        Aspect::Form10q,
        Aspect::Form10k,
        Aspect::Ecc,
        Aspect::OtherAspects,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Aspect::HistoricalMomentum => "historical momentum",
            Aspect::NewsInsights => "news insights",
            Aspect::Form10q => "Form 10-Q",
            Aspect::Form10k => "Form 10-K",
            Aspect::Ecc => "ECC",
            Aspect::OtherAspects => "other aspects",
        }
    }

    pub fn parse(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.key() == key)
    }

    pub fn vocabulary() -> Vec<&'static str> {
        Self::ALL.iter().map(|a| a.key()).collect()
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Either advisory prose or a list of short items (`other aspects` is
/// usually a list of themes).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AspectText {
    Text(String),
    Items(Vec<String>),
}

impl AspectText {
    pub fn from_json(value: &serde_json::Value) -> Option<Self> {
        match value {
            serde_json::Value::String(s) if !s.trim().is_empty() => Some(Self::Text(s.clone())),
            serde_json::Value::Array(items) if !items.is_empty() => items
                .iter()
                .map(|i| i.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .map(Self::Items),
            _ => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            AspectText::Text(s) => s.clone(),
            AspectText::Items(items) => items.join(", "),
        }
    }
}

pub type BeliefBlock = BTreeMap<Aspect, AspectText>;

pub fn render_belief_block(block: &BeliefBlock) -> String {
    if block.is_empty() {
        return "(no investment beliefs recorded yet)".to_string();
    }
    block
        .iter()
        .map(|(aspect, text)| format!("- {aspect}: {}", text.render()))
        .collect::<Vec<_>>()
        .join("\n")
}
