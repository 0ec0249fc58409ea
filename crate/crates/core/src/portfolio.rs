//! Stock-pool selection, shrinkage moment estimates and the
//! direction-constrained mean-variance allocation
//! `max_w <w, mu> - <w, Sigma w>` with per-asset weight boxes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Direction;

pub const DEFAULT_SHRINKAGE: f64 = 0.3;
pub const DEFAULT_MIN_NEWS: usize = 800;

const MAX_ITERATIONS: usize = 10_000;
const OBJECTIVE_TOLERANCE: f64 = 1e-10;
const PSD_TOLERANCE: f64 = 1e-10;
/// Above this many candidate subsets `select_stocks` falls back to the greedy pass.
const EXHAUSTIVE_SUBSET_LIMIT: u64 = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PortfolioError {
    #[error("need at least 2 return observations, got {0}")]
    InsufficientSamples(usize),
    #[error("return panel is malformed: {0}")]
    InvalidPanel(String),
    #[error("covariance matrix is not symmetric positive semidefinite ({0})")]
    NonPSDMatrix(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("solver did not converge (projected-gradient residual {0:e})")]
    SolverNonConvergence(f64),
    #[error("non-positive price {0}")]
    NonPositivePrice(f64),
    #[error("non-positive capital {0}")]
    NonPositiveCapital(f64),
    #[error("only {available} candidates pass the news filter, need {needed}")]
    InsufficientCandidates { needed: usize, available: usize },
    #[error("shrinkage intensity {0} outside [0, 1]")]
    InvalidShrinkage(f64),
}

/// Daily log returns, one row per date and one column per ticker.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    pub tickers: Vec<String>,
    pub dates: Vec<chrono::NaiveDate>,
    pub returns: DMatrix<f64>,
}

impl ReturnPanel {
    pub fn new(
        tickers: Vec<String>,
        dates: Vec<chrono::NaiveDate>,
        returns: DMatrix<f64>,
    ) -> Result<Self, PortfolioError> {
        if returns.ncols() != tickers.len() || returns.nrows() != dates.len() {
            return Err(PortfolioError::InvalidPanel(format!(
                "{}x{} matrix for {} dates and {} tickers",
                returns.nrows(),
                returns.ncols(),
                dates.len(),
                tickers.len()
            )));
        }
        if returns.iter().any(|x| !x.is_finite()) {
            return Err(PortfolioError::InvalidPanel("non-finite entry".into()));
        }
        Ok(Self {
            tickers,
            dates,
            returns,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimates {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MVInputs {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub directions: Vec<Direction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub w: Vec<f64>,
}

/// Convex shrinkage toward the diagonal of the sample covariance and the
/// grand mean of the sample means. Uses the unbiased (n-1) covariance.
pub fn shrink_estimates(panel: &ReturnPanel, lambda: f64) -> Result<MomentEstimates, PortfolioError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PortfolioError::InvalidShrinkage(lambda));
    }
    let t = panel.returns.nrows();
    if t < 2 {
        return Err(PortfolioError::InsufficientSamples(t));
    }
    let n = panel.returns.ncols();
    let sample_mu = DVector::from_iterator(n, panel.returns.column_iter().map(|c| c.mean()));
    let centered = DMatrix::from_fn(t, n, |i, j| panel.returns[(i, j)] - sample_mu[j]);
    let sample_cov = (centered.transpose() * &centered) / (t as f64 - 1.0);

    let grand_mean = if n == 0 { 0.0 } else { sample_mu.mean() };
    let mu = sample_mu.map(|m| (1.0 - lambda) * m + lambda * grand_mean);
    let sigma = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            sample_cov[(i, i)]
        } else {
            (1.0 - lambda) * sample_cov[(i, j)]
        }
    });
    Ok(MomentEstimates { mu, sigma })
}

pub fn mv_objective(mu: &DVector<f64>, sigma: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    mu.dot(w) - w.dot(&(sigma * w))
}

fn check_psd(sigma: &DMatrix<f64>) -> Result<(), PortfolioError> {
    let scale = sigma.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    for i in 0..sigma.nrows() {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > PSD_TOLERANCE * scale {
                return Err(PortfolioError::NonPSDMatrix(format!(
                    "entry ({i},{j}) differs from ({j},{i})"
                )));
            }
        }
    }
    if sigma.nrows() == 0 {
        return Ok(());
    }
    let min_eig = sigma.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -PSD_TOLERANCE * scale {
        return Err(PortfolioError::NonPSDMatrix(format!(
            "minimum eigenvalue {min_eig:e}"
        )));
    }
    Ok(())
}

fn project(w: &mut DVector<f64>, bounds: &[(f64, f64)]) {
    for (x, (lo, hi)) in w.iter_mut().zip(bounds) {
        *x = x.clamp(*lo, *hi);
    }
}

/// Max-norm of `w - P(w + grad)`; zero exactly at a KKT point.
fn projected_gradient_residual(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    w: &DVector<f64>,
    bounds: &[(f64, f64)],
) -> f64 {
    let grad = mu - 2.0 * (sigma * w);
    let mut stepped = w + grad;
    project(&mut stepped, bounds);
    (w - stepped).amax()
}

/// Projected gradient ascent with step `1 / (2 G)`, where `G` is the Gershgorin
/// bound on the largest eigenvalue of `Sigma`, followed by an exact solve of
/// the stationarity system on the free coordinates of the active set found.
pub fn solve_mean_variance(inputs: &MVInputs) -> Result<WeightVector, PortfolioError> {
    let n = inputs.directions.len();
    let (mu, sigma) = (&inputs.mu, &inputs.sigma);
    if mu.len() != n || sigma.nrows() != n || sigma.ncols() != n {
        return Err(PortfolioError::DimensionMismatch(format!(
            "mu {} / sigma {}x{} / directions {n}",
            mu.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if mu.iter().chain(sigma.iter()).any(|x| !x.is_finite()) {
        return Err(PortfolioError::DimensionMismatch("non-finite input".into()));
    }
    check_psd(sigma)?;
    let bounds: Vec<(f64, f64)> = inputs.directions.iter().map(|d| d.bounds()).collect();

    let gershgorin = (0..n)
        .map(|i| sigma.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let mut w = DVector::zeros(n);
    if gershgorin == 0.0 {
        // Linear objective: each coordinate goes to the bound its return favours.
        for i in 0..n {
            let (lo, hi) = bounds[i];
            w[i] = if mu[i] > 0.0 {
                hi
            } else if mu[i] < 0.0 {
                lo
            } else {
                0.0
            };
        }
        return Ok(WeightVector {
            w: w.iter().copied().collect(),
        });
    }

    let step = 1.0 / (2.0 * gershgorin);
    let mut value = mv_objective(mu, sigma, &w);
    for _ in 0..MAX_ITERATIONS {
        let grad = mu - 2.0 * (sigma * &w);
        let mut next = &w + step * grad;
        project(&mut next, &bounds);
        let next_value = mv_objective(mu, sigma, &next);
        let change = (next_value - value).abs();
        w = next;
        value = next_value;
        if change < OBJECTIVE_TOLERANCE {
            break;
        }
    }

    if let Some(polished) = polish(mu, sigma, &w, &bounds) {
        let polished_value = mv_objective(mu, sigma, &polished);
        if polished_value >= value - 1e-14 {
            w = polished;
        }
    }

    let residual = projected_gradient_residual(mu, sigma, &w, &bounds);
    if !residual.is_finite() || residual > 1e-4 {
        return Err(PortfolioError::SolverNonConvergence(residual));
    }
    Ok(WeightVector {
        w: w.iter().copied().collect(),
    })
}

/// Treats coordinates at a bound with an outward-pointing gradient as fixed and
/// solves `2 Sigma_FF w_F = mu_F - 2 Sigma_FB w_B` for the rest. Returns `None`
/// when the solve leaves the box or breaks the KKT sign conditions.
fn polish(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    w: &DVector<f64>,
    bounds: &[(f64, f64)],
) -> Option<DVector<f64>> {
    let n = w.len();
    let grad = mu - 2.0 * (sigma * w);
    let tol = 1e-9;
    let mut fixed = vec![false; n];
    let mut candidate = w.clone();
    for i in 0..n {
        let (lo, hi) = bounds[i];
        if lo == hi {
            fixed[i] = true;
            candidate[i] = lo;
        } else if (w[i] - hi).abs() <= tol && grad[i] >= 0.0 {
            fixed[i] = true;
            candidate[i] = hi;
        } else if (w[i] - lo).abs() <= tol && grad[i] <= 0.0 {
            fixed[i] = true;
            candidate[i] = lo;
        }
    }
    let free: Vec<usize> = (0..n).filter(|i| !fixed[*i]).collect();
    if !free.is_empty() {
        let m = free.len();
        let a = DMatrix::from_fn(m, m, |r, c| 2.0 * sigma[(free[r], free[c])]);
        let b = DVector::from_fn(m, |r, _| {
            let i = free[r];
            let coupling: f64 = (0..n)
                .filter(|j| fixed[*j])
                .map(|j| sigma[(i, j)] * candidate[j])
                .sum();
            mu[i] - 2.0 * coupling
        });
        let solution = a.clone().lu().solve(&b).or_else(|| {
            a.svd(true, true).solve(&b, 1e-12).ok()
        })?;
        for (r, &i) in free.iter().enumerate() {
            let (lo, hi) = bounds[i];
            let x = solution[r];
            if !x.is_finite() || x < lo - 1e-12 || x > hi + 1e-12 {
                return None;
            }
            candidate[i] = x.clamp(lo, hi);
        }
    }
    let grad = mu - 2.0 * (sigma * &candidate);
    for i in 0..n {
        let (lo, hi) = bounds[i];
        if lo == hi {
            continue;
        }
        let at_hi = candidate[i] >= hi;
        let at_lo = candidate[i] <= lo;
        let ok = if at_hi {
            grad[i] >= -1e-9
        } else if at_lo {
            grad[i] <= 1e-9
        } else {
            grad[i].abs() <= 1e-9
        };
        if !ok {
            return None;
        }
    }
    Some(candidate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareRounding {
    #[default]
    Fractional,
    TowardZero,
}

/// `target_n = w_n * capital / price_n`.
pub fn scale_to_positions(
    w: &WeightVector,
    capital: f64,
    prices: &[f64],
    rounding: ShareRounding,
) -> Result<Vec<f64>, PortfolioError> {
    if !(capital > 0.0) {
        return Err(PortfolioError::NonPositiveCapital(capital));
    }
    if w.w.len() != prices.len() {
        return Err(PortfolioError::DimensionMismatch(format!(
            "{} weights for {} prices",
            w.w.len(),
            prices.len()
        )));
    }
    w.w.iter()
        .zip(prices)
        .map(|(wn, p)| {
            if !(*p > 0.0) {
                return Err(PortfolioError::NonPositivePrice(*p));
            }
            let shares = wn * capital / p;
            Ok(match rounding {
                ShareRounding::Fractional => shares,
                ShareRounding::TowardZero => shares.trunc(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StockCandidate {
    pub ticker: String,
    pub news_count: usize,
    pub returns: Vec<f64>,
}

/// Pearson correlation over the common trailing window; 0 when either side
/// has no variance.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().min(b.len());
    if len < 2 {
        return 0.0;
    }
    let (a, b) = (&a[a.len() - len..], &b[b.len() - len..]);
    let ma = a.iter().sum::<f64>() / len as f64;
    let mb = b.iter().sum::<f64>() / len as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u64) / (i as u64 + 1);
    }
    acc
}

fn mean_pairwise(set: &[usize], abs_corr: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, a) in set.iter().enumerate() {
        for b in &set[i + 1..] {
            total += abs_corr[*a][*b];
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Filters by news count, then picks `n` tickers with the lowest average
/// pairwise absolute return correlation. Small pools are searched exactly;
/// larger ones use a greedy pass seeded by the least-correlated pair. Ties go
/// to the lexicographically smaller ticker (set). The result is sorted.
pub fn select_stocks(
    candidates: &[StockCandidate],
    n: usize,
    min_news: usize,
) -> Result<Vec<String>, PortfolioError> {
    let mut pool: Vec<&StockCandidate> = candidates
        .iter()
        .filter(|c| c.news_count >= min_news)
        .collect();
    if n == 0 || pool.len() < n {
        return Err(PortfolioError::InsufficientCandidates {
            needed: n,
            available: pool.len(),
        });
    }
    pool.sort_by(|a, b| a.ticker.cmp(&b.ticker));
    let m = pool.len();
    let abs_corr: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| correlation(&pool[i].returns, &pool[j].returns).abs())
                .collect()
        })
        .collect();

    let chosen = if binomial(m, n) <= EXHAUSTIVE_SUBSET_LIMIT {
        exact_subset(m, n, &abs_corr)
    } else {
        greedy_subset(m, n, &abs_corr)
    };
    let mut tickers: Vec<String> = chosen.into_iter().map(|i| pool[i].ticker.clone()).collect();
    tickers.sort();
    Ok(tickers)
}

fn exact_subset(m: usize, n: usize, abs_corr: &[Vec<f64>]) -> Vec<usize> {
    // Lexicographic enumeration keeps the first (smallest) subset on ties.
    let mut idx: Vec<usize> = (0..n).collect();
    let mut best = idx.clone();
    let mut best_score = mean_pairwise(&idx, abs_corr);
    loop {
        let Some(pos) = (0..n).rev().find(|&p| idx[p] < m - n + p) else {
            break;
        };
        idx[pos] += 1;
        for q in pos + 1..n {
            idx[q] = idx[q - 1] + 1;
        }
        let score = mean_pairwise(&idx, abs_corr);
        if score < best_score {
            best_score = score;
            best = idx.clone();
        }
    }
    best
}

fn greedy_subset(m: usize, n: usize, abs_corr: &[Vec<f64>]) -> Vec<usize> {
    if n == 1 {
        return vec![0];
    }
    let mut seed = (0, 1);
    for i in 0..m {
        for j in i + 1..m {
            if abs_corr[i][j] < abs_corr[seed.0][seed.1] {
                seed = (i, j);
            }
        }
    }
    let mut chosen = vec![seed.0, seed.1];
    while chosen.len() < n {
        let mut best: Option<(usize, f64)> = None;
        for k in (0..m).filter(|k| !chosen.contains(k)) {
            let score = chosen.iter().map(|c| abs_corr[k][*c]).sum::<f64>() / chosen.len() as f64;
            if best.is_none_or(|(_, s)| score < s) {
                best = Some((k, score));
            }
        }
        chosen.push(best.expect("pool has enough candidates").0);
    }
    chosen
}
