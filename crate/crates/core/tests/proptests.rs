//! Property tests against brute-force oracles written independently of the
//! library code.

use chrono::{Days, NaiveDate};
use fincon::backtest::{objective_value, wilcoxon_signed_rank};
use fincon::data_ingest::TradingCalendar;
use fincon::memory::{MemoryEvent, MemoryLayer, MemoryQuery, MemoryStore};
use fincon::portfolio::{
    mv_objective, select_stocks, shrink_estimates, solve_mean_variance, MVInputs, ReturnPanel, StockCandidate,
};
use fincon::risk_control::{cvar, overlap_percentage, var, within_episode_check, ReflectionTrigger, RiskState};
use fincon::{AgentId, Direction};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

// ---------- CVaR ----------

/// Quantile and tail mean computed by counting, without sorting.
fn cvar_oracle(values: &[f64], alpha: f64) -> (f64, f64) {
    let n = values.len() as f64;
    let mut candidates = values.to_vec();
    candidates.dedup();
    let var = candidates
        .iter()
        .copied()
        .filter(|c| values.iter().filter(|x| *x <= c).count() as f64 / n >= alpha)
        .fold(f64::INFINITY, f64::min);
    let tail: Vec<f64> = values.iter().copied().filter(|x| *x <= var).collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    (var, mean)
}

fn pnl_history() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            4 => -0.1f64..0.1,
            1 => prop::sample::select(vec![-0.05, 0.0, 0.01, 0.02]),
        ],
        1..=500,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn cvar_matches_brute_force(h in pnl_history(), alpha in prop::sample::select(vec![0.01, 0.05, 0.1, 0.25, 0.5, 0.99])) {
        let (v, c) = cvar_oracle(&h, alpha);
        prop_assert_eq!(var(&h, alpha).unwrap(), v);
        let got = cvar(&h, alpha).unwrap();
        prop_assert!((got - c).abs() < 1e-12, "{} vs {}", got, c);
        prop_assert!(got <= v + 1e-15);
    }
}

proptest! {
    #[test]
    fn cvar_is_translation_equivariant(h in pnl_history(), shift in -1.0f64..1.0) {
        let moved: Vec<f64> = h.iter().map(|x| x + shift).collect();
        let a = cvar(&h, 0.05).unwrap() + shift;
        let b = cvar(&moved, 0.05).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cvar_ignores_order(mut h in pnl_history()) {
        let a = cvar(&h, 0.01).unwrap();
        h.reverse();
        prop_assert!((a - cvar(&h, 0.01).unwrap()).abs() < 1e-12);
    }
}

// ---------- Trigger truth table ----------

#[test]
fn trigger_truth_table_is_exhaustive() {
    let date = NaiveDate::from_ymd_opt(2023, 1, 2).unwrap();
    for armed in [false, true] {
        for cvar_pair in [None, Some((-0.02, -0.01)), Some((-0.01, -0.01)), Some((-0.01, -0.02))] {
            for r in [-0.01, 0.0, 0.01] {
                let (now, prev) = cvar_pair.map_or((None, None), |(n, p)| (Some(n), Some(p)));
                let state = RiskState {
                    date,
                    cvar: now,
                    prev_cvar: prev,
                    alert: false,
                    history_len: if armed { 10 } else { 9 },
                    trigger: None,
                };
                let out = within_episode_check(&state, r, 10);
                let drop = armed && matches!(cvar_pair, Some((n, p)) if n < p);
                let loss = r < 0.0;
                assert_eq!(out.alert, drop || loss, "{armed} {cvar_pair:?} {r}");
                let expected = if drop {
                    Some(ReflectionTrigger::CvarDrop)
                } else if loss {
                    Some(ReflectionTrigger::NegativePnl)
                } else {
                    None
                };
                assert_eq!(out.trigger, expected);
                assert_eq!(out.cvar, state.cvar);
            }
        }
    }
}

// ---------- Memory retrieval ----------

const DIM: usize = 4;

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2023, 1, 2).unwrap()
}

fn calendar(days: u64) -> TradingCalendar {
    TradingCalendar::new((0..days).map(|i| start() + Days::new(i)).collect())
}

#[derive(Debug, Clone)]
struct EventSpec {
    emb: [f64; DIM],
    v: f64,
    theta: f64,
    day: u64,
    bonus: f64,
}

fn event_spec(days: u64) -> impl Strategy<Value = EventSpec> {
    (
        prop::array::uniform4(-1.0f64..1.0).prop_filter("nonzero", |e| e.iter().any(|x| x.abs() > 1e-3)),
        0.0f64..=1.0,
        prop::sample::select(vec![0.90, 0.95, 0.97, 0.99]),
        0..days,
        prop::sample::select(vec![0.0, 0.0, 0.0, 5.0]),
    )
        .prop_map(|(emb, v, theta, day, bonus)| EventSpec { emb, v, theta, day, bonus })
}

fn to_event(i: usize, s: &EventSpec) -> MemoryEvent {
    MemoryEvent {
        event_id: format!("e{i:05}"),
        owner: AgentId::from("news_analyst"),
        layer: MemoryLayer::Working,
        content: String::new(),
        embedding: s.emb.to_vec(),
        initial_importance: s.v,
        decay_ratio: s.theta,
        created_at: start() + Days::new(s.day),
        access_bonus: s.bonus,
    }
}

/// Independent scorer: cosine + min-max scaling + v * theta^dt, ranked by
/// score, then recency, then id.
fn top_k_oracle(specs: &[EventSpec], q: &[f64; DIM], as_of_day: u64, k: usize) -> Vec<String> {
    let live: Vec<(usize, &EventSpec)> = specs.iter().enumerate().filter(|(_, s)| s.day <= as_of_day).collect();
    if live.is_empty() {
        return Vec::new();
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rel: Vec<f64> = live
        .iter()
        .map(|(_, s)| s.emb.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (norm(&s.emb) * norm(q)))
        .collect();
    let imp: Vec<f64> = live
        .iter()
        .map(|(_, s)| s.v * s.theta.powi((as_of_day - s.day) as i32) + s.bonus)
        .collect();
    let scale = |xs: &[f64]| -> Vec<f64> {
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        xs.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 }).collect()
    };
    let (rel, imp) = (scale(&rel), scale(&imp));
    let mut ranked: Vec<(f64, u64, String)> = live
        .iter()
        .enumerate()
        .map(|(j, (i, s))| (rel[j] + imp[j], s.day, format!("e{i:05}")))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    ranked.into_iter().take(k).map(|r| r.2).collect()
}

fn retrieve(store: &MemoryStore, q: &[f64; DIM], as_of_day: u64, k: usize) -> Vec<String> {
    let query = MemoryQuery {
        query_text: String::new(),
        embedding: q.to_vec(),
        as_of: start() + Days::new(as_of_day),
        k,
    };
    store
        .retrieve_top_k(&AgentId::from("news_analyst"), &query)
        .unwrap()
        .into_iter()
        .map(|s| s.event.event_id)
        .collect()
}

fn memory_case(max_events: usize) -> impl Strategy<Value = (Vec<EventSpec>, [f64; DIM], u64, usize)> {
    (
        prop::collection::vec(event_spec(60), 1..=max_events),
        prop::array::uniform4(0.1f64..1.0),
        0u64..60,
        1usize..=8,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn top_k_matches_brute_force((specs, q, as_of, k) in memory_case(300)) {
        let store = MemoryStore::new(DIM, calendar(60));
        for (i, s) in specs.iter().enumerate() {
            store.insert(to_event(i, s)).unwrap();
        }
        prop_assert_eq!(retrieve(&store, &q, as_of, k), top_k_oracle(&specs, &q, as_of, k));
    }

    #[test]
    fn ranking_is_invariant_to_affine_importance_changes((specs, q, as_of, k) in memory_case(100)) {
        // Adding the same bonus everywhere shifts raw importance uniformly.
        let base = MemoryStore::new(DIM, calendar(60));
        let shifted = MemoryStore::new(DIM, calendar(60));
        for (i, s) in specs.iter().enumerate() {
            let mut e = to_event(i, s);
            e.access_bonus = 0.0;
            base.insert(e.clone()).unwrap();
            e.access_bonus = 3.0;
            shifted.insert(e).unwrap();
        }
        prop_assert_eq!(retrieve(&base, &q, as_of, k), retrieve(&shifted, &q, as_of, k));
    }

    #[test]
    fn importance_never_grows_with_age(s in event_spec(1), a in 0u32..100, b in 0u32..100) {
        let e = to_event(0, &s);
        let (young, old) = (a.min(b), a.max(b));
        prop_assert!(
            fincon::memory::decayed_importance(&e, old) <= fincon::memory::decayed_importance(&e, young)
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn top_k_matches_brute_force_on_large_stores((specs, q, as_of, k) in memory_case(10_000)) {
        let store = MemoryStore::new(DIM, calendar(60));
        for (i, s) in specs.iter().enumerate() {
            store.insert(to_event(i, s)).unwrap();
        }
        prop_assert_eq!(retrieve(&store, &q, as_of, k), top_k_oracle(&specs, &q, as_of, k));
    }
}

// ---------- Mean-variance solver ----------

fn direction() -> impl Strategy<Value = Direction> {
    prop::sample::select(vec![Direction::Long, Direction::Short, Direction::Neutral])
}

fn mv_case() -> impl Strategy<Value = MVInputs> {
    (1usize..=6)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(-2.0f64..2.0, n),
                prop::collection::vec(-1.0f64..1.0, n * n),
                prop::collection::vec(direction(), n),
            )
        })
        .prop_map(|(mu, a, directions)| {
            let n = mu.len();
            let a = DMatrix::from_vec(n, n, a);
            let sigma = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
            MVInputs {
                mu: DVector::from_vec(mu),
                sigma,
                directions,
            }
        })
}

/// Cyclic coordinate ascent with exact clamped line maximization.
fn mv_oracle(inputs: &MVInputs) -> Vec<f64> {
    let n = inputs.mu.len();
    let mut w = vec![0.0; n];
    for _ in 0..200_000 {
        let mut moved = 0.0f64;
        for i in 0..n {
            let (lo, hi) = inputs.directions[i].bounds();
            let cross: f64 = (0..n).filter(|j| *j != i).map(|j| inputs.sigma[(i, j)] * w[j]).sum();
            let x = ((inputs.mu[i] - 2.0 * cross) / (2.0 * inputs.sigma[(i, i)])).clamp(lo, hi);
            moved = moved.max((x - w[i]).abs());
            w[i] = x;
        }
        if moved < 1e-14 {
            break;
        }
    }
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn mv_solver_matches_coordinate_ascent(inputs in mv_case()) {
        let got = solve_mean_variance(&inputs).unwrap().w;
        let want = mv_oracle(&inputs);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-6, "{:?} vs {:?}", got, want);
        }
        for (g, d) in got.iter().zip(&inputs.directions) {
            let (lo, hi) = d.bounds();
            prop_assert!(*g >= lo && *g <= hi);
        }
    }

    #[test]
    fn mv_solution_satisfies_kkt(inputs in mv_case()) {
        let w = DVector::from_vec(solve_mean_variance(&inputs).unwrap().w);
        let grad = &inputs.mu - 2.0 * (&inputs.sigma * &w);
        for i in 0..w.len() {
            let (lo, hi) = inputs.directions[i].bounds();
            if lo == hi {
                continue;
            }
            if w[i] >= hi {
                prop_assert!(grad[i] >= -1e-7);
            } else if w[i] <= lo {
                prop_assert!(grad[i] <= 1e-7);
            } else {
                prop_assert!(grad[i].abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn mv_beats_grid_search_for_two_assets(inputs in mv_case().prop_filter("n <= 2", |i| i.mu.len() <= 2)) {
        let got = DVector::from_vec(solve_mean_variance(&inputs).unwrap().w);
        let best = mv_objective(&inputs.mu, &inputs.sigma, &got);
        let n = inputs.mu.len();
        let grid = |d: Direction| -> Vec<f64> {
            let (lo, hi) = d.bounds();
            (0..=200).map(|k| lo + (hi - lo) * k as f64 / 200.0).collect()
        };
        let first = grid(inputs.directions[0]);
        let second = if n == 2 { grid(inputs.directions[1]) } else { vec![0.0] };
        for a in &first {
            for b in &second {
                let w = if n == 2 { DVector::from_vec(vec![*a, *b]) } else { DVector::from_vec(vec![*a]) };
                prop_assert!(mv_objective(&inputs.mu, &inputs.sigma, &w) <= best + 1e-9);
            }
        }
    }
}

// ---------- Shrinkage ----------

fn panel() -> impl Strategy<Value = ReturnPanel> {
    (1usize..=5, 2usize..=40)
        .prop_flat_map(|(n, t)| (Just(n), Just(t), prop::collection::vec(-0.05f64..0.05, n * t)))
        .prop_map(|(n, t, data)| {
            ReturnPanel::new(
                (0..n).map(|i| format!("T{i}")).collect(),
                (0..t as u64).map(|d| start() + Days::new(d)).collect(),
                DMatrix::from_vec(t, n, data),
            )
            .unwrap()
        })
}

proptest! {
    #[test]
    fn full_shrinkage_gives_diagonal_covariance_and_equal_means(p in panel()) {
        let est = shrink_estimates(&p, 1.0).unwrap();
        let n = p.tickers.len();
        let t = p.returns.nrows() as f64;
        let grand = p.returns.iter().sum::<f64>() / p.returns.len() as f64;
        for i in 0..n {
            prop_assert!((est.mu[i] - grand).abs() < 1e-12);
            let col = p.returns.column(i);
            let m = col.iter().sum::<f64>() / t;
            let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (t - 1.0);
            prop_assert!((est.sigma[(i, i)] - var).abs() < 1e-12);
            for j in 0..n {
                if i != j {
                    prop_assert_eq!(est.sigma[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_shrinkage_keeps_sample_means(p in panel()) {
        let est = shrink_estimates(&p, 0.0).unwrap();
        for i in 0..p.tickers.len() {
            let col = p.returns.column(i);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            prop_assert!((est.mu[i] - m).abs() < 1e-12);
        }
    }
}

// ---------- Stock selection ----------

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn set_score(set: &[&StockCandidate]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            total += pearson(&set[i].returns, &set[j].returns).abs();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

fn candidates() -> impl Strategy<Value = Vec<StockCandidate>> {
    prop::collection::vec((0usize..1500, prop::collection::vec(-0.05f64..0.05, 30)), 1..=8).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (news_count, returns))| StockCandidate {
                ticker: format!("S{i}"),
                news_count,
                returns,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn selection_is_optimal_among_eligible_subsets(cands in candidates(), n in 1usize..=3) {
        let eligible: Vec<&StockCandidate> = cands.iter().filter(|c| c.news_count >= 800).collect();
        let got = select_stocks(&cands, n, 800);
        if eligible.len() < n {
            prop_assert!(got.is_err());
            return Ok(());
        }
        let got = got.unwrap();
        prop_assert_eq!(got.len(), n);
        let chosen: Vec<&StockCandidate> = eligible.iter().copied().filter(|c| got.contains(&c.ticker)).collect();
        prop_assert_eq!(chosen.len(), n);
        let mut best = f64::INFINITY;
        let m = eligible.len();
        for mask in 0u32..(1 << m) {
            if mask.count_ones() as usize != n {
                continue;
            }
            let subset: Vec<&StockCandidate> = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| eligible[i]).collect();
            best = best.min(set_score(&subset));
        }
        prop_assert!((set_score(&chosen) - best).abs() < 1e-12);
    }
}

// ---------- Overlap, discounting, Wilcoxon ----------

proptest! {
    #[test]
    fn overlap_is_symmetric_and_bounded(pair in (1usize..100).prop_flat_map(|n| {
        (prop::collection::vec(direction(), n), prop::collection::vec(direction(), n))
    })) {
        let (a, b) = pair;
        let ab = overlap_percentage(&a, &b).unwrap();
        prop_assert_eq!(ab, overlap_percentage(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(overlap_percentage(&a, &a).unwrap(), 1.0);
        let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64;
        prop_assert!((ab - agree / a.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn overlap_rejects_length_mismatch(n in 1usize..50) {
        let a = vec![Direction::Long; n];
        let b = vec![Direction::Long; n + 1];
        prop_assert!(overlap_percentage(&a, &b).is_err());
    }

    #[test]
    fn discounted_objective_is_monotone_for_gains(
        pnl in prop::collection::vec(0.0f64..0.05, 1..60),
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
    ) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(objective_value(&pnl, lo) <= objective_value(&pnl, hi) + 1e-15);
        let plain: f64 = pnl.iter().sum();
        prop_assert!((objective_value(&pnl, 1.0) - plain).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_is_antisymmetric(pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 6..60)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(a.iter().zip(&b).filter(|(x, y)| x != y).count() >= 6);
        let ab = wilcoxon_signed_rank(&a, &b).unwrap();
        let ba = wilcoxon_signed_rank(&b, &a).unwrap();
        prop_assert_eq!(ab.w_plus, ba.w_minus);
        prop_assert_eq!(ab.w_minus, ba.w_plus);
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!(ab.p_value > 0.0 && ab.p_value <= 1.0);
        let n = ab.n as f64;
        prop_assert!((ab.w_plus + ab.w_minus - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }
}
