//! Time-dependent concordance and Brier score at fixed horizons.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataset::SurvivalDataset;
use crate::par::Execution;
use crate::timegrid::{quantile_horizons, CensoringDistribution, TimeGridError};
use crate::trainer::{TrainError, TrainedModel};

pub const DEFAULT_QUANTILES: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no comparable pairs for event {event} at horizon {tau}")]
    NoComparablePairs { event: u32, tau: f64 },
    #[error("no subject can be scored at horizon {tau}")]
    NoScoreableSubjects { tau: f64 },
    #[error("input lengths differ")]
    LengthMismatch,
    #[error(transparent)]
    TimeGrid(#[from] TimeGridError),
    #[error("model: {0}")]
    Model(String),
}

impl From<TrainError> for MetricsError {
    fn from(e: TrainError) -> Self {
        MetricsError::Model(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Concordance {
    pub value: f64,
    pub n_pairs: usize,
}

/// Binary indexed tree of counts over risk ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

fn dense_ranks(values: &[f64]) -> (Vec<usize>, usize) {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let ranks = values
        .iter()
        .map(|v| sorted.partition_point(|x| x.total_cmp(v).is_lt()))
        .collect();
    (ranks, sorted.len())
}

/// Time-dependent concordance for event `k` at horizon `tau`.
///
/// Pairs `(i, j)` with `e_i = k`, `t_i < t_j`, `t_i ≤ τ` are comparable;
/// the pair is concordant when `risk_i > risk_j` and earns half credit on
/// a risk tie. With `weights`, each pair counts `w_i²`. Runs in
/// `O(n log n)`.
pub fn c_td(
    risk: &[f64],
    durations: &[f64],
    events: &[u32],
    tau: f64,
    k: u32,
    weights: Option<&[f64]>,
) -> Result<Concordance, MetricsError> {
    let n = risk.len();
    if durations.len() != n || events.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(MetricsError::LengthMismatch);
    }
    let (ranks, n_ranks) = dense_ranks(risk);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| durations[b].total_cmp(&durations[a]));

    // Walk times from latest to earliest; the tree holds everyone with a
    // strictly later time than the current group.
    let mut later = Fenwick::new(n_ranks);
    let mut n_later = 0u64;
    let (mut num, mut den) = (0.0, 0.0);
    let mut n_pairs = 0usize;
    let mut g = 0;
    while g < n {
        let t = durations[order[g]];
        let mut end = g;
        while end < n && durations[order[end]] == t {
            end += 1;
        }
        if t <= tau {
            for &i in &order[g..end] {
                if events[i] != k || n_later == 0 {
                    continue;
                }
                let lower = later.below(ranks[i]);
                let tied = later.below(ranks[i] + 1) - lower;
                let w = weights.map_or(1.0, |w| w[i] * w[i]);
                num += w * (lower as f64 + 0.5 * tied as f64);
                den += w * n_later as f64;
                n_pairs += n_later as usize;
            }
        }
        for &i in &order[g..end] {
            later.add(ranks[i]);
            n_later += 1;
        }
        g = end;
    }
    if n_pairs == 0 || den <= 0.0 {
        return Err(MetricsError::NoComparablePairs { event: k, tau });
    }
    Ok(Concordance {
        value: num / den,
        n_pairs,
    })
}

/// Outcome at `tau` for event `k`: `Some(1)` event by τ, `Some(0)` still
/// at risk after τ, `None` censored (or another event) at or before τ.
fn outcome(t: f64, e: u32, tau: f64, k: u32) -> Option<f64> {
    if t > tau {
        Some(0.0)
    } else if e == k {
        Some(1.0)
    } else {
        None
    }
}

/// Mean of `(f_i − o_i)²` with `f_i = 1 − S(τ|x_i)` over subjects whose
/// status at `tau` is known.
pub fn brier(survival_at_tau: &[f64], durations: &[f64], events: &[u32], tau: f64, k: u32) -> Result<f64, MetricsError> {
    let n = survival_at_tau.len();
    if durations.len() != n || events.len() != n {
        return Err(MetricsError::LengthMismatch);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..n {
        if let Some(o) = outcome(durations[i], events[i], tau, k) {
            let f = 1.0 - survival_at_tau[i];
            sum += (f - o) * (f - o);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::NoScoreableSubjects { tau });
    }
    Ok(sum / count as f64)
}

/// Brier score with inverse-probability-of-censoring weights: subjects
/// with the event by τ count `1/G(t_i⁻)`, subjects past τ count `1/G(τ)`,
/// censored ones count 0; the sum is divided by `n`.
pub fn brier_ipcw(
    survival_at_tau: &[f64],
    durations: &[f64],
    events: &[u32],
    tau: f64,
    k: u32,
    censoring: &CensoringDistribution,
) -> Result<f64, MetricsError> {
    let n = survival_at_tau.len();
    if durations.len() != n || events.len() != n {
        return Err(MetricsError::LengthMismatch);
    }
    let mut sum = 0.0;
    let mut scored = 0;
    for i in 0..n {
        let Some(o) = outcome(durations[i], events[i], tau, k) else {
            continue;
        };
        let w = if o == 1.0 {
            censoring.raw_weight(durations[i])
        } else {
            censoring.raw_weight(tau.next_up())
        };
        let f = 1.0 - survival_at_tau[i];
        sum += w * (f - o) * (f - o);
        scored += 1;
    }
    if scored == 0 {
        return Err(MetricsError::NoScoreableSubjects { tau });
    }
    Ok((sum / n as f64).min(1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub event: u32,
    pub quantile: f64,
    pub tau: f64,
    /// NaN when the horizon has no comparable pair for this event.
    pub c_td: f64,
    /// NaN when no subject can be scored.
    pub brier: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_HEADER: &str = "event,quantile,tau,c_td,brier,n_pairs";

impl MetricReport {
    pub fn horizons(&self) -> Vec<(f64, f64)> {
        let mut h: Vec<(f64, f64)> = Vec::new();
        for r in &self.rows {
            if !h.iter().any(|&(q, _)| q == r.quantile) {
                h.push((r.quantile, r.tau));
            }
        }
        h
    }

    pub fn get(&self, event: u32, quantile: f64) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.event == event && r.quantile == quantile)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.event, r.quantile, r.tau, r.c_td, r.brier, r.n_pairs
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>5}  {:>8}  {:>10}  {:>7}  {:>7}  {:>8}\n",
            "event", "quantile", "tau", "c_td", "brier", "n_pairs"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>5}  {:>8.2}  {:>10.4}  {:>7.4}  {:>7.4}  {:>8}",
                r.event, r.quantile, r.tau, r.c_td, r.brier, r.n_pairs
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub quantiles: Vec<f64>,
    /// Weight concordance pairs by squared inverse censoring probability.
    pub ipcw_concordance: bool,
    /// Use [`brier_ipcw`] instead of the plain score.
    pub ipcw_brier: bool,
    pub execution: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            quantiles: DEFAULT_QUANTILES.to_vec(),
            ipcw_concordance: true,
            ipcw_brier: false,
            execution: Execution::default(),
        }
    }
}

/// Scores `survival[k][i] = S_k(τ | x_i)` against the observed outcomes.
pub fn score_horizon(
    survival: &[Vec<f64>],
    durations: &[f64],
    events: &[u32],
    quantile: f64,
    tau: f64,
    censoring: &CensoringDistribution,
    opts: &EvalOptions,
) -> Vec<MetricRow> {
    let weights: Option<Vec<f64>> = opts.ipcw_concordance.then(|| {
        durations
            .iter()
            .map(|&t| censoring.raw_weight(t))
            .collect()
    });
    survival
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let event = k as u32 + 1;
            let risk: Vec<f64> = s.iter().map(|x| 1.0 - x).collect();
            let c = c_td(&risk, durations, events, tau, event, weights.as_deref()).ok();
            let b = if opts.ipcw_brier {
                brier_ipcw(s, durations, events, tau, event, censoring)
            } else {
                brier(s, durations, events, tau, event)
            };
            MetricRow {
                event,
                quantile,
                tau,
                c_td: c.map_or(f64::NAN, |c| c.value),
                brier: b.unwrap_or(f64::NAN),
                n_pairs: c.map_or(0, |c| c.n_pairs),
            }
        })
        .collect()
}

/// Evaluates `model` on `test` at quantiles of the test set's uncensored
/// durations, for every event type.
pub fn evaluate_model(model: &TrainedModel, test: &SurvivalDataset, opts: &EvalOptions) -> Result<MetricReport, MetricsError> {
    model.check_compatible(test)?;
    let (d, e) = (test.durations(), test.events());
    let taus = quantile_horizons(&d, &e, &opts.quantiles)?;
    let preds = opts.execution.map(&test.sequences, |s| model.predict(s));
    let preds = preds.into_iter().collect::<Result<Vec<_>, _>>()?;
    let censoring = CensoringDistribution::fit(&d, &e);
    let mut report = MetricReport::default();
    for (&q, &tau) in opts.quantiles.iter().zip(&taus) {
        let k_events = model.num_events as usize;
        let mut survival = vec![Vec::with_capacity(test.len()); k_events];
        for p in &preds {
            for (k, s) in model.survival_at(p, tau).into_iter().enumerate() {
                survival[k].push(s);
            }
        }
        report
            .rows
            .extend(score_horizon(&survival, &d, &e, q, tau, &censoring, opts));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfectly_ordered_risks() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let c = c_td(&[4.0, 3.0, 2.0, 1.0], &t, &[1; 4], 4.0, 1, None).unwrap();
        assert_eq!(c.value, 1.0);
        assert_eq!(c.n_pairs, 6);
    }

    #[test]
    fn three_subject_example() {
        let c = c_td(&[0.9, 0.2, 0.5], &[1.0, 2.0, 3.0], &[1; 3], 3.0, 1, None).unwrap();
        assert!((c.value - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.n_pairs, 3);
    }

    #[test]
    fn equal_risks_are_half() {
        let c = c_td(&[0.3; 5], &[1.0, 2.0, 3.0, 4.0, 5.0], &[1, 0, 1, 1, 0], 5.0, 1, None).unwrap();
        assert_eq!(c.value, 0.5);
    }

    #[test]
    fn tied_times_are_not_comparable() {
        assert!(matches!(
            c_td(&[0.1, 0.9], &[2.0, 2.0], &[1, 1], 5.0, 1, None),
            Err(MetricsError::NoComparablePairs { .. })
        ));
    }

    #[test]
    fn horizon_limits_anchor_subjects() {
        // only subject 0 (t = 1) may anchor a pair at τ = 1.5
        let c = c_td(&[0.1, 0.9, 0.5], &[1.0, 2.0, 3.0], &[1, 1, 1], 1.5, 1, None).unwrap();
        assert_eq!(c.n_pairs, 2);
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn brier_examples() {
        let d = [1.0, 2.0, 5.0, 6.0];
        let e = [1, 1, 0, 1];
        assert_eq!(brier(&[0.0, 0.0, 1.0, 1.0], &d, &e, 3.0, 1).unwrap(), 0.0);
        assert_eq!(brier(&[0.5; 4], &d, &e, 3.0, 1).unwrap(), 0.25);
        assert_eq!(brier(&[0.0], &[5.0], &[1], 3.0, 1).unwrap(), 1.0);
    }

    #[test]
    fn brier_drops_censored_before_horizon() {
        let d = [1.0, 2.0, 5.0];
        let e = [0, 1, 1];
        let b = brier(&[0.0, 0.2, 0.9], &d, &e, 3.0, 1).unwrap();
        assert!((b - (0.04 + 0.01) / 2.0).abs() < 1e-15);
        assert!(matches!(
            brier(&[0.5], &[1.0], &[0], 3.0, 1),
            Err(MetricsError::NoScoreableSubjects { .. })
        ));
    }

    #[test]
    fn ipcw_brier_without_censoring_is_plain() {
        let d = [1.0, 2.0, 5.0, 6.0];
        let e = [1, 1, 1, 1];
        let g = CensoringDistribution::fit(&d, &e);
        let s = [0.3, 0.6, 0.8, 0.1];
        let a = brier(&s, &d, &e, 3.0, 1).unwrap();
        let b = brier_ipcw(&s, &d, &e, 3.0, 1, &g).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn report_csv_columns() {
        let r = MetricReport {
            rows: vec![MetricRow {
                event: 1,
                quantile: 0.5,
                tau: 2.5,
                c_td: 0.75,
                brier: 0.125,
                n_pairs: 10,
            }],
        };
        assert_eq!(r.to_csv(), "event,quantile,tau,c_td,brier,n_pairs\n1,0.5,2.5,0.75,0.125,10\n");
        assert_eq!(r.horizons(), vec![(0.5, 2.5)]);
        assert!(r.to_table().contains("0.7500"));
    }
}
