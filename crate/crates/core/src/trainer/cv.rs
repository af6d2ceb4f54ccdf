use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{early_stopping_split, train_with, TrainConfig, TrainError};
use crate::dataset::SurvivalDataset;
use crate::metrics::{evaluate_model, EvalOptions, MetricReport};
use crate::par::Execution;
use crate::synth::{augment, generate, GeneratorConfig};

/// Extra training data added inside every fold.
#[derive(Clone, Debug, PartialEq)]
pub enum Augmentation {
    /// Generated from each fold's training patients.
    Generator(GeneratorConfig),
    /// The same externally supplied synthetic patients in every fold.
    Fixed(SurvivalDataset),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    pub eval: EvalOptions,
    pub augmentation: Option<Augmentation>,
    pub execution: Execution,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            eval: EvalOptions::default(),
            augmentation: None,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub event: u32,
    pub quantile: f64,
    pub c_td_mean: f64,
    pub c_td_std: f64,
    pub brier_mean: f64,
    pub brier_std: f64,
    /// Folds with a defined value.
    pub n_folds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub folds: Vec<MetricReport>,
    pub aggregate: Vec<AggregateRow>,
}

impl CvReport {
    pub fn from_folds(folds: Vec<MetricReport>) -> Self {
        let mut aggregate = Vec::new();
        if let Some(first) = folds.first() {
            for r in &first.rows {
                let pick = |f: fn(&crate::metrics::MetricRow) -> f64| -> Vec<f64> {
                    folds
                        .iter()
                        .filter_map(|rep| rep.get(r.event, r.quantile).map(f))
                        .filter(|x| x.is_finite())
                        .collect()
                };
                let c = pick(|m| m.c_td);
                let b = pick(|m| m.brier);
                let (c_td_mean, c_td_std) = mean_std(&c);
                let (brier_mean, brier_std) = mean_std(&b);
                aggregate.push(AggregateRow {
                    event: r.event,
                    quantile: r.quantile,
                    c_td_mean,
                    c_td_std,
                    brier_mean,
                    brier_std,
                    n_folds: c.len(),
                });
            }
        }
        Self { folds, aggregate }
    }

    pub fn aggregate_row(&self, event: u32, quantile: f64) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|r| r.event == event && r.quantile == quantile)
    }

    pub fn folds_csv(&self) -> String {
        let mut out = String::from("fold,event,quantile,tau,c_td,brier,n_pairs\n");
        for (f, rep) in self.folds.iter().enumerate() {
            for r in &rep.rows {
                let _ = writeln!(
                    out,
                    "{f},{},{},{},{},{},{}",
                    r.event, r.quantile, r.tau, r.c_td, r.brier, r.n_pairs
                );
            }
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("event,quantile,c_td_mean,c_td_std,brier_mean,brier_std,n_folds\n");
        for r in &self.aggregate {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.event, r.quantile, r.c_td_mean, r.c_td_std, r.brier_mean, r.brier_std, r.n_folds
            );
        }
        out
    }

    /// `mean(std)` cells, one line per event and quantile.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:>5}  {:>8}  {:>16}  {:>16}\n", "event", "quantile", "c_td", "brier");
        for r in &self.aggregate {
            let _ = writeln!(
                out,
                "{:>5}  {:>8.2}  {:>16}  {:>16}",
                r.event,
                r.quantile,
                format!("{:.4}({:.4})", r.c_td_mean, r.c_td_std),
                format!("{:.4}({:.4})", r.brier_mean, r.brier_std)
            );
        }
        out
    }
}

/// Mean and sample standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Held-out index sets for `k` folds over the real patients. Synthetic
/// patients are never held out.
pub fn assign_folds(data: &SurvivalDataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, TrainError> {
    let mut real: Vec<usize> = (0..data.len()).filter(|&i| !data.sequences[i].is_synthetic()).collect();
    if k < 2 || real.len() < k {
        return Err(TrainError::TooFewPatients {
            patients: real.len(),
            folds: k,
        });
    }
    real.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in real.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

fn run_fold(
    config: &TrainConfig,
    data: &SurvivalDataset,
    test_idx: &[usize],
    fold: usize,
    opts: &CvOptions,
) -> Result<MetricReport, TrainError> {
    let train_idx: Vec<usize> = (0..data.len()).filter(|i| test_idx.binary_search(i).is_err()).collect();
    let test = data.subset(test_idx);
    let fold_seed = opts.seed.wrapping_add(fold as u64);
    let (mut tr, va) = early_stopping_split(&data.subset(&train_idx), config.val_fraction, fold_seed);
    match &opts.augmentation {
        None => {}
        Some(Augmentation::Generator(g)) => {
            let real: Vec<usize> = (0..tr.len()).filter(|&i| !tr.sequences[i].is_synthetic()).collect();
            let cfg = GeneratorConfig {
                seed: g.seed.wrapping_add(fold as u64),
                ..g.clone()
            };
            let syn = generate(&tr.subset(&real), &cfg).map_err(|e| TrainError::Incompatible(e.to_string()))?;
            tr = augment(&tr, &syn).map_err(|e| TrainError::Incompatible(e.to_string()))?;
        }
        Some(Augmentation::Fixed(syn)) => {
            tr = augment(&tr, syn).map_err(|e| TrainError::Incompatible(e.to_string()))?;
        }
    }
    let model = train_with(config, &tr, &va, opts.execution)?;
    let eval = EvalOptions {
        execution: opts.execution,
        ..opts.eval.clone()
    };
    Ok(evaluate_model(&model, &test, &eval)?)
}

/// Patient-level K-fold cross-validation. Folds train independently and
/// may run concurrently; reports come back in fold order.
pub fn cross_validate(config: &TrainConfig, data: &SurvivalDataset, opts: &CvOptions) -> Result<CvReport, TrainError> {
    let folds = assign_folds(data, opts.folds, opts.seed)?;
    let reports = opts
        .execution
        .map_range(folds.len(), |f| run_fold(config, data, &folds[f], f, opts));
    Ok(CvReport::from_folds(reports.into_iter().collect::<Result<_, _>>()?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub best: usize,
    /// Best validation PCH loss reached by each candidate.
    pub val_losses: Vec<f64>,
}

/// `n` configurations drawn from the tuning ranges around `base`.
pub fn random_candidates(base: &TrainConfig, n: usize, seed: u64) -> Vec<TrainConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TrainConfig {
            learning_rate: 10f64.powf(rng.random_range(-4.0..=-3.0)),
            weight_decay: *[0.0, 1e-4, 1e-3].choose(&mut rng).unwrap(),
            n_layers: rng.random_range(2..=4),
            d_ff: *[32, 64].choose(&mut rng).unwrap(),
            n_heads: *[1, 2, 4].choose(&mut rng).unwrap(),
            head_depth: rng.random_range(1..=2),
            n_features: rng.random_range(15..=30),
            ..base.clone()
        })
        .collect()
}

/// Trains every candidate and picks the lowest validation PCH loss.
pub fn grid_search(
    candidates: &[TrainConfig],
    train: &SurvivalDataset,
    val: &SurvivalDataset,
    exec: Execution,
) -> Result<SearchResult, TrainError> {
    assert!(!candidates.is_empty(), "no candidates");
    let mut val_losses = Vec::with_capacity(candidates.len());
    for c in candidates {
        let m = train_with(c, train, val, exec)?;
        val_losses.push(m.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min));
    }
    let best = (0..val_losses.len())
        .min_by(|&a, &b| val_losses[a].total_cmp(&val_losses[b]))
        .unwrap();
    Ok(SearchResult { best, val_losses })
}
