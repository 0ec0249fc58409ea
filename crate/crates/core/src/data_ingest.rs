//! File-based market data: price CSVs, document JSONL corpora, derived
//! indicators and the per-day observation bundle handed to the analysts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MOMENTUM_WINDOW: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("{path}: schema error at row {row}, column `{column}`: {detail}")]
    SchemaError {
        path: PathBuf,
        row: usize,
        column: String,
        detail: String,
    },
    #[error("{path}: dates are not strictly increasing at {date}")]
    NonMonotoneDates { path: PathBuf, date: NaiveDate },
    #[error("non-positive price: {0}")]
    NonPositivePrice(f64),
    #[error("insufficient history: need {needed} bars, have {available}")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("date {0} is outside the simulation range")]
    DateOutOfRange(NaiveDate),
    #[error("no price for {ticker} at or before {date}")]
    MissingPrice { ticker: String, date: NaiveDate },
    #[error("duplicate document id `{0}`")]
    DuplicateDocument(String),
    #[error("io error on {path}: {detail}")]
    Io { path: PathBuf, detail: String },
}

impl DataError {
    /// Row and column of a schema violation, if this is one.
    pub fn schema_location(&self) -> Option<(usize, &str)> {
        match self {
            DataError::SchemaError { row, column, .. } => Some((*row, column.as_str())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: u64,
}

impl PriceBar {
    /// Returns the offending column name if the bar breaks an OHLC invariant.
    pub fn violation(&self) -> Option<&'static str> {
        let fields = [
            ("open", self.open),
            ("high", self.high),
            ("low", self.low),
            ("close", self.close),
            ("adj_close", self.adj_close),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Some(name);
            }
        }
        if self.low > self.high {
            return Some("low");
        }
        if self.open < self.low || self.open > self.high {
            return Some("open");
        }
        if self.close < self.low || self.close > self.high {
            return Some("close");
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub ticker: String,
    pub bars: Vec<PriceBar>,
}

impl PriceSeries {
    /// Builds a series, checking bar invariants and strict date ordering.
    pub fn new(ticker: impl Into<String>, bars: Vec<PriceBar>) -> Result<Self, DataError> {
        let ticker = ticker.into();
        let path = PathBuf::from(format!("<{ticker}>"));
        for (i, bar) in bars.iter().enumerate() {
            if let Some(column) = bar.violation() {
                return Err(DataError::SchemaError {
                    path,
                    row: i + 1,
                    column: column.to_string(),
                    detail: "price bar invariant violated".into(),
                });
            }
        }
        for pair in bars.windows(2) {
            if pair[1].date <= pair[0].date {
                return Err(DataError::NonMonotoneDates {
                    path,
                    date: pair[1].date,
                });
            }
        }
        Ok(Self { ticker, bars })
    }

    /// Index of the last bar dated at or before `date`.
    pub fn index_at_or_before(&self, date: NaiveDate) -> Option<usize> {
        let n = self.bars.partition_point(|b| b.date <= date);
        n.checked_sub(1)
    }

    pub fn bar_at_or_before(&self, date: NaiveDate) -> Option<&PriceBar> {
        self.index_at_or_before(date).map(|i| &self.bars[i])
    }

    pub fn bar_on(&self, date: NaiveDate) -> Option<&PriceBar> {
        self.bar_at_or_before(date).filter(|b| b.date == date)
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.bars.iter().map(|b| b.date).collect()
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    date: String,
    open: String,
    high: String,
    low: String,
    close: String,
    adj_close: String,
    volume: String,
}

const PRICE_HEADER: [&str; 7] = ["date", "open", "high", "low", "close", "adj_close", "volume"];

/// Loads a price CSV. Rows are 1-based data rows (the header is row 0).
/// Rows are sorted by date after validation; duplicated dates are rejected.
pub fn load_price_series(path: &Path, ticker: &str) -> Result<PriceSeries, DataError> {
    if !path.exists() {
        return Err(DataError::FileNotFound(path.to_path_buf()));
    }
    let schema_err = |row: usize, column: &str, detail: String| DataError::SchemaError {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| schema_err(0, "header", e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != PRICE_HEADER {
        return Err(schema_err(
            0,
            "header",
            format!("expected `{}`", PRICE_HEADER.join(",")),
        ));
    }

    let mut bars = Vec::new();
    for (i, record) in reader.deserialize::<CsvRow>().enumerate() {
        let row = i + 1;
        let raw = record.map_err(|e| schema_err(row, "row", e.to_string()))?;
        let date = NaiveDate::parse_from_str(&raw.date, "%Y-%m-%d")
            .map_err(|e| schema_err(row, "date", e.to_string()))?;
        let num = |column: &str, text: &str| -> Result<f64, DataError> {
            text.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| schema_err(row, column, format!("not a decimal: `{text}`")))
        };
        let volume = raw
            .volume
            .parse::<u64>()
            .or_else(|_| {
                // Accept integral decimals such as `1200.0`.
                raw.volume
                    .parse::<f64>()
                    .ok()
                    .filter(|v| *v >= 0.0 && v.fract() == 0.0)
                    .map(|v| v as u64)
                    .ok_or(())
            })
            .map_err(|_| schema_err(row, "volume", format!("not a count: `{}`", raw.volume)))?;
        let bar = PriceBar {
            date,
            open: num("open", &raw.open)?,
            high: num("high", &raw.high)?,
            low: num("low", &raw.low)?,
            close: num("close", &raw.close)?,
            adj_close: num("adj_close", &raw.adj_close)?,
            volume,
        };
        if let Some(column) = bar.violation() {
            return Err(schema_err(row, column, "price bar invariant violated".into()));
        }
        bars.push(bar);
    }

    bars.sort_by_key(|b| b.date);
    if let Some(pair) = bars.windows(2).find(|p| p[0].date == p[1].date) {
        return Err(DataError::NonMonotoneDates {
            path: path.to_path_buf(),
            date: pair[1].date,
        });
    }
    Ok(PriceSeries {
        ticker: ticker.to_string(),
        bars,
    })
}

pub fn log_return(p_prev: f64, p_next: f64) -> Result<f64, DataError> {
    if !(p_prev > 0.0) {
        return Err(DataError::NonPositivePrice(p_prev));
    }
    if !(p_next > 0.0) {
        return Err(DataError::NonPositivePrice(p_next));
    }
    Ok((p_next / p_prev).ln())
}

/// Trailing simple return on `adj_close` over `window` trading days ending at
/// the last bar on or before `date`.
pub fn momentum(series: &PriceSeries, date: NaiveDate, window: usize) -> Result<f64, DataError> {
    let available = series.index_at_or_before(date).map_or(0, |i| i + 1);
    let needed = window + 1;
    if window == 0 || available < needed {
        return Err(DataError::InsufficientHistory { needed, available });
    }
    let end = available - 1;
    let now = series.bars[end].adj_close;
    let then = series.bars[end - window].adj_close;
    Ok(now / then - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    News,
    Form10k,
    Form10q,
    EccTranscript,
    AnalystReport,
}

impl DocKind {
    pub const ALL: [DocKind; 5] = [
        DocKind::News,
        DocKind::Form10k,
        DocKind::Form10q,
        DocKind::EccTranscript,
        DocKind::AnalystReport,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DocKind::News => "news",
            DocKind::Form10k => "form10k",
            DocKind::Form10q => "form10q",
            DocKind::EccTranscript => "ecc_transcript",
            DocKind::AnalystReport => "analyst_report",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDocument {
    pub doc_id: String,
    pub ticker: String,
    pub kind: DocKind,
    pub published: NaiveDate,
    pub body: String,
}

/// Loads a document JSONL file. Row numbers are 1-based line numbers.
pub fn load_documents(path: &Path) -> Result<Vec<TextDocument>, DataError> {
    let file = File::open(path).map_err(|_| DataError::FileNotFound(path.to_path_buf()))?;
    let schema_err = |row: usize, column: &str, detail: String| DataError::SchemaError {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        detail,
    };
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| schema_err(row, "line", e.to_string()))?;
        let field = |name: &str| -> Result<&str, DataError> {
            value
                .get(name)
                .and_then(|v| v.as_str())
                .ok_or_else(|| schema_err(row, name, "missing or not a string".into()))
        };
        let kind_text = field("kind")?;
        let kind = DocKind::parse(kind_text)
            .ok_or_else(|| schema_err(row, "kind", format!("unknown kind `{kind_text}`")))?;
        let published = NaiveDate::parse_from_str(field("published")?, "%Y-%m-%d")
            .map_err(|e| schema_err(row, "published", e.to_string()))?;
        let body = field("body")?;
        if body.trim().is_empty() {
            return Err(schema_err(row, "body", "empty body".into()));
        }
        let doc_id = field("doc_id")?;
        if doc_id.is_empty() {
            return Err(schema_err(row, "doc_id", "empty id".into()));
        }
        docs.push(TextDocument {
            doc_id: doc_id.to_string(),
            ticker: field("ticker")?.to_string(),
            kind,
            published,
            body: body.to_string(),
        });
    }
    Ok(docs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Indicators {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_return: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickerObservation {
    pub bar: PriceBar,
    pub indicators: Indicators,
    /// Documents grouped by the analyst kind that owns them, each list ordered
    /// by `(published, doc_id)`.
    pub documents: BTreeMap<DocKind, Vec<TextDocument>>,
}

impl TickerObservation {
    pub fn documents_of(&self, kind: DocKind) -> &[TextDocument] {
        self.documents.get(&kind).map_or(&[], |v| v.as_slice())
    }

    pub fn document_count(&self) -> usize {
        self.documents.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub date: NaiveDate,
    pub tickers: BTreeMap<String, TickerObservation>,
}

/// Ordered list of trading days; the decision cadence of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradingCalendar {
    days: Vec<NaiveDate>,
}

impl TradingCalendar {
    pub fn new(mut days: Vec<NaiveDate>) -> Self {
        days.sort();
        days.dedup();
        Self { days }
    }

    pub fn days(&self) -> &[NaiveDate] {
        &self.days
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.days.binary_search(&date).is_ok()
    }

    /// Trading days `d` with `from < d <= to`.
    pub fn trading_days_between(&self, from: NaiveDate, to: NaiveDate) -> u32 {
        if to <= from {
            return 0;
        }
        let lo = self.days.partition_point(|d| *d <= from);
        let hi = self.days.partition_point(|d| *d <= to);
        (hi - lo) as u32
    }

    /// First trading day on or after `date`.
    pub fn next_on_or_after(&self, date: NaiveDate) -> Option<NaiveDate> {
        let i = self.days.partition_point(|d| *d < date);
        self.days.get(i).copied()
    }

    pub fn range(&self, start: NaiveDate, end: NaiveDate) -> Vec<NaiveDate> {
        self.days
            .iter()
            .copied()
            .filter(|d| *d >= start && *d <= end)
            .collect()
    }
}

/// All loaded corpora for one run, indexed for observation assembly.
#[derive(Debug, Clone)]
pub struct MarketData {
    pub prices: BTreeMap<String, PriceSeries>,
    calendar: TradingCalendar,
    /// (ticker, effective trading date) -> documents in (published, doc_id) order.
    documents: BTreeMap<(String, NaiveDate), Vec<TextDocument>>,
    document_count: usize,
    momentum_window: usize,
}

impl MarketData {
    /// The trading calendar comes from the first ticker's price file. Documents
    /// dated on non-trading days attach to the next trading day; documents
    /// after the last trading day are kept out of every observation.
    pub fn new(
        universe: &[String],
        prices: BTreeMap<String, PriceSeries>,
        documents: Vec<TextDocument>,
        momentum_window: usize,
    ) -> Result<Self, DataError> {
        let first = universe.first().ok_or_else(|| DataError::MissingPrice {
            ticker: "<empty universe>".into(),
            date: NaiveDate::MIN,
        })?;
        let calendar = TradingCalendar::new(
            prices
                .get(first)
                .ok_or_else(|| DataError::MissingPrice {
                    ticker: first.clone(),
                    date: NaiveDate::MIN,
                })?
                .dates(),
        );
        let mut seen = BTreeSet::new();
        let mut index: BTreeMap<(String, NaiveDate), Vec<TextDocument>> = BTreeMap::new();
        let document_count = documents.len();
        for doc in documents {
            if !seen.insert(doc.doc_id.clone()) {
                return Err(DataError::DuplicateDocument(doc.doc_id));
            }
            if let Some(day) = calendar.next_on_or_after(doc.published) {
                index.entry((doc.ticker.clone(), day)).or_default().push(doc);
            }
        }
        for docs in index.values_mut() {
            docs.sort_by(|a, b| (a.published, &a.doc_id).cmp(&(b.published, &b.doc_id)));
        }
        Ok(Self {
            prices,
            calendar,
            documents: index,
            document_count,
            momentum_window,
        })
    }

    pub fn calendar(&self) -> &TradingCalendar {
        &self.calendar
    }

    pub fn momentum_window(&self) -> usize {
        self.momentum_window
    }

    pub fn total_documents(&self) -> usize {
        self.document_count
    }

    /// Number of news documents per ticker over the whole corpus.
    pub fn news_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for ((ticker, _), docs) in &self.documents {
            *counts.entry(ticker.clone()).or_insert(0) +=
                docs.iter().filter(|d| d.kind == DocKind::News).count();
        }
        counts
    }

    pub fn close_on(&self, ticker: &str, date: NaiveDate) -> Result<f64, DataError> {
        self.prices
            .get(ticker)
            .and_then(|s| s.bar_at_or_before(date))
            .map(|b| b.close)
            .ok_or_else(|| DataError::MissingPrice {
                ticker: ticker.to_string(),
                date,
            })
    }

    /// Daily log returns of `ticker` over the `window` transitions ending at `date`.
    pub fn trailing_returns(&self, ticker: &str, date: NaiveDate, window: usize) -> Vec<f64> {
        let Some(series) = self.prices.get(ticker) else {
            return Vec::new();
        };
        let Some(end) = series.index_at_or_before(date) else {
            return Vec::new();
        };
        let start = end.saturating_sub(window);
        series.bars[start..=end]
            .windows(2)
            .filter_map(|w| log_return(w[0].close, w[1].close).ok())
            .collect()
    }
}

/// Assembles the observation for `date`. Pure in `(date, universe, sources)`.
pub fn assemble_observation(
    date: NaiveDate,
    universe: &[String],
    sources: &MarketData,
) -> Result<Observation, DataError> {
    if !sources.calendar.contains(date) {
        return Err(DataError::DateOutOfRange(date));
    }
    let mut tickers = BTreeMap::new();
    for ticker in universe {
        let series = sources
            .prices
            .get(ticker)
            .ok_or_else(|| DataError::MissingPrice {
                ticker: ticker.clone(),
                date,
            })?;
        let idx = series
            .index_at_or_before(date)
            .ok_or_else(|| DataError::MissingPrice {
                ticker: ticker.clone(),
                date,
            })?;
        let bar = series.bars[idx];
        let indicators = Indicators {
            log_return: idx
                .checked_sub(1)
                .and_then(|p| log_return(series.bars[p].close, bar.close).ok()),
            momentum: momentum(series, date, sources.momentum_window).ok(),
        };
        let mut documents: BTreeMap<DocKind, Vec<TextDocument>> = BTreeMap::new();
        if let Some(docs) = sources.documents.get(&(ticker.clone(), date)) {
            for doc in docs {
                documents.entry(doc.kind).or_default().push(doc.clone());
            }
        }
        tickers.insert(
            ticker.clone(),
            TickerObservation {
                bar,
                indicators,
                documents,
            },
        );
    }
    Ok(Observation { date, tickers })
}
