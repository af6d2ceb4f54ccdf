//! Discrete time axis, Kaplan–Meier curves and censoring weights.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataset::SurvivalDataset;

/// Upper clamp on a single inverse-probability-of-censoring weight.
pub const IPCW_MAX_WEIGHT: f64 = 20.0;

pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimeGridError {
    #[error("need {bins} distinct event durations, found {distinct}")]
    InsufficientEvents { distinct: usize, bins: usize },
    #[error("no uncensored durations")]
    NoEvents,
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
}

/// Linear-interpolation quantile of an ascending slice (`h = (n − 1)·p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_event_durations(durations: &[f64], events: &[u32]) -> Vec<f64> {
    let mut d: Vec<f64> = durations
        .iter()
        .zip(events)
        .filter(|(_, &e)| e > 0)
        .map(|(&t, _)| t)
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

/// Bin edges `0 = b₀ < b₁ < … < b_B = max duration`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    boundaries: Vec<f64>,
}

impl TimeGrid {
    pub fn new(boundaries: Vec<f64>) -> Result<Self, TimeGridError> {
        if boundaries.len() < 2 {
            return Err(TimeGridError::InvalidGrid("need at least one bin".into()));
        }
        if boundaries[0] != 0.0 {
            return Err(TimeGridError::InvalidGrid("first boundary must be 0".into()));
        }
        if boundaries.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(TimeGridError::InvalidGrid("boundaries must increase strictly".into()));
        }
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn n_bins(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Last boundary: the largest training duration.
    pub fn horizon(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    /// `b` with `boundaries[b] ≤ t < boundaries[b+1]`; times past the grid
    /// fall in the last bin.
    pub fn bin_index(&self, t: f64) -> usize {
        self.steps_completed(t).min(self.n_bins() - 1)
    }

    /// Number of interior-or-final edges at or before `t`, in `0..=B`.
    /// Indexes the survival vector `S[0..=B]` under step interpolation.
    pub fn steps_completed(&self, t: f64) -> usize {
        self.boundaries[1..].partition_point(|&b| b <= t)
    }
}

/// Interior edges at the `1/B, 2/B, …` quantiles of uncensored durations.
/// Coinciding quantiles collapse, so the grid can end up with fewer bins.
pub fn fit_time_bins(durations: &[f64], events: &[u32], bins: usize) -> Result<TimeGrid, TimeGridError> {
    assert!(bins >= 1, "need at least one bin");
    let sorted = sorted_event_durations(durations, events);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < bins {
        return Err(TimeGridError::InsufficientEvents {
            distinct: distinct.len(),
            bins,
        });
    }
    let max = durations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut boundaries = vec![0.0];
    for q in 1..bins {
        let b = quantile_sorted(&sorted, q as f64 / bins as f64);
        if b > *boundaries.last().unwrap() && b < max {
            boundaries.push(b);
        }
    }
    boundaries.push(max);
    TimeGrid::new(boundaries)
}

/// Right-continuous step function, 1 before the first time.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn constant_one() -> Self {
        Self {
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Value at `t` (steps at `t` already taken).
    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 1.0,
            i => self.values[i - 1],
        }
    }

    /// Left limit at `t` (steps at `t` not yet taken).
    pub fn eval_left(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x < t) {
            0 => 1.0,
            i => self.values[i - 1],
        }
    }
}

/// Product-limit estimator: at each distinct observed time with `d` events
/// among `r` at risk, `S ← S·(1 − d/r)`.
pub fn kaplan_meier(durations: &[f64], observed: &[bool]) -> StepFunction {
    assert_eq!(durations.len(), observed.len());
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.sort_by(|&a, &b| durations[a].total_cmp(&durations[b]));
    let mut at_risk = durations.len();
    let mut s = 1.0;
    let mut curve = StepFunction::constant_one();
    let mut i = 0;
    while i < order.len() {
        let t = durations[order[i]];
        let mut j = i;
        let mut deaths = 0;
        while j < order.len() && durations[order[j]] == t {
            deaths += usize::from(observed[order[j]]);
            j += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk as f64;
            curve.times.push(t);
            curve.values.push(s);
        }
        at_risk -= j - i;
        i = j;
    }
    curve
}

/// Kaplan–Meier estimate `G` of the censoring distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct CensoringDistribution {
    pub curve: StepFunction,
}

impl CensoringDistribution {
    pub fn fit(durations: &[f64], events: &[u32]) -> Self {
        let censored: Vec<bool> = events.iter().map(|&e| e == 0).collect();
        Self {
            curve: kaplan_meier(durations, &censored),
        }
    }

    /// `min(1 / G(t⁻), w_max)`.
    pub fn raw_weight(&self, t: f64) -> f64 {
        let g = self.curve.eval_left(t);
        if g <= 0.0 {
            IPCW_MAX_WEIGHT
        } else {
            (1.0 / g).min(IPCW_MAX_WEIGHT)
        }
    }

    /// Weights for a set of subjects: clamped `1/G(t⁻)` for uncensored
    /// subjects rescaled to mean 1 among them; censored subjects get 1.
    pub fn weights(&self, durations: &[f64], events: &[u32]) -> Vec<f64> {
        let mut w: Vec<f64> = durations
            .iter()
            .zip(events)
            .map(|(&t, &e)| if e > 0 { self.raw_weight(t) } else { 1.0 })
            .collect();
        let uncensored: Vec<usize> = (0..w.len()).filter(|&i| events[i] > 0).collect();
        if !uncensored.is_empty() {
            let mean = uncensored.iter().map(|&i| w[i]).sum::<f64>() / uncensored.len() as f64;
            for &i in &uncensored {
                w[i] /= mean;
            }
        }
        w
    }
}

/// Per-patient IPCW weights fitted on the dataset's own censoring pattern.
pub fn censoring_weights(dataset: &SurvivalDataset) -> BTreeMap<String, f64> {
    let (d, e) = (dataset.durations(), dataset.events());
    let w = CensoringDistribution::fit(&d, &e).weights(&d, &e);
    dataset.ids().into_iter().map(String::from).zip(w).collect()
}

/// Requested quantiles of the uncensored durations.
pub fn quantile_horizons(durations: &[f64], events: &[u32], quantiles: &[f64]) -> Result<Vec<f64>, TimeGridError> {
    let sorted = sorted_event_durations(durations, events);
    if sorted.is_empty() {
        return Err(TimeGridError::NoEvents);
    }
    Ok(quantiles.iter().map(|&q| quantile_sorted(&sorted, q)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_to_hundred() -> (Vec<f64>, Vec<u32>) {
        ((1..=100).map(f64::from).collect(), vec![1; 100])
    }

    #[test]
    fn quartile_bins_on_one_to_hundred() {
        let (d, e) = one_to_hundred();
        let g = fit_time_bins(&d, &e, 4).unwrap();
        assert_eq!(g.boundaries(), &[0.0, 25.75, 50.5, 75.25, 100.0]);
    }

    #[test]
    fn single_bin() {
        let g = fit_time_bins(&[3.0, 9.0], &[1, 0], 1).unwrap();
        assert_eq!(g.boundaries(), &[0.0, 9.0]);
    }

    #[test]
    fn equal_durations_are_insufficient() {
        assert!(matches!(
            fit_time_bins(&[5.0; 10], &[1; 10], 2),
            Err(TimeGridError::InsufficientEvents { distinct: 1, bins: 2 })
        ));
    }

    #[test]
    fn bin_index_examples() {
        let g = TimeGrid::new(vec![0.0, 10.0, 20.0]).unwrap();
        assert_eq!(g.bin_index(5.0), 0);
        assert_eq!(g.bin_index(10.0), 1);
        assert_eq!(g.bin_index(99.0), 1);
        assert_eq!(g.steps_completed(5.0), 0);
        assert_eq!(g.steps_completed(20.0), 2);
    }

    #[test]
    fn km_all_events() {
        let s = kaplan_meier(&[1.0, 2.0, 3.0], &[true; 3]);
        assert!((s.eval(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.eval(2.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.eval(3.0), 0.0);
        assert_eq!(s.eval(0.5), 1.0);
        assert!((s.eval_left(2.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn km_all_censored_and_single() {
        let s = kaplan_meier(&[1.0, 4.0], &[false, false]);
        assert_eq!(s.eval(10.0), 1.0);
        let s = kaplan_meier(&[5.0], &[true]);
        assert_eq!(s.eval(5.0), 0.0);
    }

    #[test]
    fn no_censoring_means_unit_weights() {
        let (d, e) = one_to_hundred();
        let g = CensoringDistribution::fit(&d, &e);
        assert!(g.weights(&d, &e).iter().all(|&w| w == 1.0));
    }

    #[test]
    fn late_event_weight_from_censoring_km() {
        // censoring KM: one censoring at t = 3 among 2 at risk → G = 1/2
        let d = [1.0, 2.0, 3.0, 4.0];
        let e = [1, 1, 0, 1];
        let g = CensoringDistribution::fit(&d, &e);
        assert_eq!(g.raw_weight(4.0), 2.0);
        assert_eq!(g.raw_weight(3.0), 1.0);
        let w = g.weights(&d, &e);
        let mean = (w[0] + w[1] + w[3]) / 3.0;
        assert!((mean - 1.0).abs() < 1e-15);
        assert_eq!(w[2], 1.0);
        assert!((w[3] / w[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn weights_are_clamped() {
        // G drops to zero before the last event
        let g = CensoringDistribution::fit(&[1.0, 2.0], &[0, 1]);
        assert_eq!(g.curve.eval(1.0), 0.5);
        let g = CensoringDistribution::fit(&[1.0, 2.0, 2.0], &[0, 0, 1]);
        assert!(g.raw_weight(3.0) <= IPCW_MAX_WEIGHT);
    }

    #[test]
    fn horizons() {
        let (d, e) = one_to_hundred();
        let h = quantile_horizons(&d, &e, &[0.25, 0.5, 0.75]).unwrap();
        assert_eq!(h, vec![25.75, 50.5, 75.25]);
        assert_eq!(quantile_horizons(&[7.0, 9.0], &[1, 0], &[0.1, 0.9]).unwrap(), vec![7.0, 7.0]);
        assert_eq!(quantile_horizons(&[7.0], &[0], &[0.5]), Err(TimeGridError::NoEvents));
    }
}
