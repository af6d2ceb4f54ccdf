//! Synthetic training data and the optimism divergence between survival
//! curves.
//!
//! The built-in generator is a stratified bootstrap with feature jitter.
//! Externally generated records can be brought in through
//! [`import_synthetic`] instead.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dataset::{assemble_sequences, DatasetError, PatientSequence, RawTable, SurvivalDataset, SYNTHETIC_PREFIX};
use crate::numerics::Tensor;
use crate::timegrid::{kaplan_meier, quantile_sorted, StepFunction};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("training set is empty")]
    EmptyTraining,
    #[error("{0} has no observed events")]
    NoEvents(&'static str),
    #[error("invalid generator setting: {0}")]
    InvalidConfig(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    BootstrapJitter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    /// Synthetic visit records as a fraction of the training visits.
    pub fraction: f64,
    /// Numerical noise, in units of each feature's training std.
    pub jitter_scale: f64,
    /// Durations are scaled by `U(1 − d, 1 + d)`; 0 disables.
    pub duration_jitter: f64,
    pub seed: u64,
}

pub const DEFAULT_JITTER_SCALE: f64 = 0.1;
pub const DEFAULT_DURATION_JITTER: f64 = 0.05;

/// 1.0 for single-record data, 0.5 for visit sequences.
pub fn default_fraction(data: &SurvivalDataset) -> f64 {
    if data.max_visits <= 1 {
        1.0
    } else {
        0.5
    }
}

impl GeneratorConfig {
    pub fn for_dataset(data: &SurvivalDataset, seed: u64) -> Self {
        Self {
            kind: GeneratorKind::BootstrapJitter,
            fraction: default_fraction(data),
            jitter_scale: DEFAULT_JITTER_SCALE,
            duration_jitter: DEFAULT_DURATION_JITTER,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !(self.fraction > 0.0 && self.fraction.is_finite()) {
            return Err(SynthError::InvalidConfig(format!("fraction {}", self.fraction)));
        }
        if !(self.jitter_scale >= 0.0 && self.jitter_scale.is_finite()) {
            return Err(SynthError::InvalidConfig(format!("jitter_scale {}", self.jitter_scale)));
        }
        if !(0.0..1.0).contains(&self.duration_jitter) {
            return Err(SynthError::InvalidConfig(format!("duration_jitter {}", self.duration_jitter)));
        }
        Ok(())
    }
}

/// Stratum of each patient: `4·event + duration quartile`.
fn strata(data: &SurvivalDataset) -> Vec<usize> {
    let mut d = data.durations();
    d.sort_by(f64::total_cmp);
    let cuts = [0.25, 0.5, 0.75].map(|q| quantile_sorted(&d, q));
    data.sequences
        .iter()
        .map(|s| 4 * s.event as usize + cuts.iter().filter(|&&c| s.duration > c).count())
        .collect()
}

/// Population std of each numerical column over all real visits.
fn numerical_std(data: &SurvivalDataset) -> Vec<f64> {
    let n_num = data.schema.n_num();
    let mut sum = vec![0.0; n_num];
    let mut sq = vec![0.0; n_num];
    let mut count = 0.0;
    for s in &data.sequences {
        for v in 0..s.n_real {
            for (j, &x) in s.visits.row_slice(v)[..n_num].iter().enumerate() {
                sum[j] += x;
                sq[j] += x * x;
            }
            count += 1.0;
        }
    }
    (0..n_num)
        .map(|j| (sq[j] / count - (sum[j] / count).powi(2)).max(0.0).sqrt())
        .collect()
}

/// Samples synthetic patients until `round(fraction · training visits)`
/// visit records exist; the last patient is cut short to hit the budget.
///
/// Source patients are drawn stratum by stratum (event type × duration
/// quartile) in proportion to stratum sizes, then uniformly within the
/// stratum. Each copy gets Gaussian noise on its numericals, categorical
/// blocks from another patient of the same stratum, and a jittered
/// duration. With `jitter_scale = 0` and `duration_jitter = 0` every
/// synthetic visit row is a verbatim training row.
pub fn generate(train: &SurvivalDataset, config: &GeneratorConfig) -> Result<SurvivalDataset, SynthError> {
    config.validate()?;
    if train.is_empty() {
        return Err(SynthError::EmptyTraining);
    }
    let budget = (config.fraction * train.total_visits() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let stratum_of = strata(train);
    let n_strata = stratum_of.iter().max().unwrap() + 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_strata];
    for (i, &s) in stratum_of.iter().enumerate() {
        members[s].push(i);
    }
    let stds = numerical_std(train);
    let offsets = train.schema.categorical_offsets();
    let widths: Vec<usize> = train.schema.categorical.iter().map(|c| c.vocabulary.len()).collect();
    let taken: HashSet<&str> = train.ids().into_iter().collect();

    // smooth weighted round-robin over strata
    let total = train.len() as i64;
    let mut credit = vec![0i64; n_strata];
    let mut sequences = Vec::new();
    let mut produced = 0;
    let mut next_id = 0usize;
    while produced < budget {
        for (c, m) in credit.iter_mut().zip(&members) {
            *c += m.len() as i64;
        }
        let s = (0..n_strata).max_by_key(|&s| (credit[s], std::cmp::Reverse(s))).unwrap();
        credit[s] -= total;
        let pool = &members[s];
        let src = &train.sequences[pool[rng.random_range(0..pool.len())]];

        let n_real = src.n_real.min(budget - produced);
        let mut visits = Tensor::zeros(src.visits.shape());
        let width = train.schema.encoded_width();
        visits.data_mut()[..n_real * width].copy_from_slice(&src.visits.data()[..n_real * width]);
        if config.jitter_scale > 0.0 {
            for (j, &sd) in stds.iter().enumerate() {
                if sd == 0.0 {
                    continue;
                }
                let noise = Normal::new(0.0, config.jitter_scale * sd).expect("finite std");
                for v in 0..n_real {
                    let x = &mut visits.data_mut()[v * width + j];
                    *x = (*x + noise.sample(&mut rng)).max(0.0);
                }
            }
            for (&off, &w) in offsets.iter().zip(&widths) {
                let donor = &train.sequences[pool[rng.random_range(0..pool.len())]];
                for v in 0..n_real {
                    let dv = v.min(donor.n_real - 1);
                    let from = &donor.visits.row_slice(dv)[off..off + w];
                    visits.data_mut()[v * width + off..v * width + off + w].copy_from_slice(from);
                }
            }
        }
        let duration = if config.duration_jitter > 0.0 {
            src.duration * rng.random_range(1.0 - config.duration_jitter..=1.0 + config.duration_jitter)
        } else {
            src.duration
        };
        let patient_id = loop {
            let id = format!("{SYNTHETIC_PREFIX}{next_id:06}");
            next_id += 1;
            if !taken.contains(id.as_str()) {
                break id;
            }
        };
        sequences.push(PatientSequence {
            patient_id,
            visits,
            visit_times: src.visit_times[..n_real].to_vec(),
            n_real,
            duration,
            event: src.event,
        });
        produced += n_real;
    }
    Ok(SurvivalDataset {
        schema: train.schema.clone(),
        sequences,
        max_visits: train.max_visits,
        num_events: train.num_events,
    })
}

/// Encodes externally generated long-format records with the training
/// schema and marks every patient as synthetic.
pub fn import_synthetic(table: &RawTable, train: &SurvivalDataset) -> Result<SurvivalDataset, SynthError> {
    let mut data = assemble_sequences(table, &train.schema, train.max_visits)?;
    for s in &mut data.sequences {
        if !s.is_synthetic() {
            s.patient_id = format!("{SYNTHETIC_PREFIX}{}", s.patient_id);
        }
    }
    Ok(data)
}

/// `train ∪ synthetic`; the two must share schema and sequence length.
pub fn augment(train: &SurvivalDataset, synthetic: &SurvivalDataset) -> Result<SurvivalDataset, SynthError> {
    if synthetic.is_empty() {
        return Ok(train.clone());
    }
    train
        .same_layout(synthetic)
        .map_err(|e| SynthError::SchemaMismatch(e.to_string()))?;
    let mut out = train.clone();
    out.sequences.extend(synthetic.sequences.iter().cloned());
    out.num_events = train.num_events.max(synthetic.num_events);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimismReport {
    pub value: f64,
    /// Weight ramp length `T`.
    pub horizon: f64,
    /// Integration limit.
    pub upper: f64,
    pub curve_syn: StepFunction,
    pub curve_real: StepFunction,
}

impl OptimismReport {
    pub fn summary_csv(&self) -> String {
        format!("optimism,horizon,upper\n{},{},{}\n", self.value, self.horizon, self.upper)
    }

    /// Both curves evaluated at every step time of either curve.
    pub fn curves_csv(&self) -> String {
        let mut times: Vec<f64> = vec![0.0];
        times.extend(&self.curve_real.times);
        times.extend(&self.curve_syn.times);
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut out = String::from("time,survival_real,survival_synthetic\n");
        for t in times {
            let _ = writeln!(out, "{t},{},{}", self.curve_real.eval(t), self.curve_syn.eval(t));
        }
        out
    }
}

/// `∫₀^upper f(t)·[S_syn(t) − S_real(t)] dt` with `f(t) = t/T` up to `T`
/// and 1 after, evaluated exactly over the constant pieces.
pub fn optimism_from_curves(syn: &StepFunction, real: &StepFunction, horizon: f64, upper: f64) -> f64 {
    assert!(horizon > 0.0, "T must be positive");
    let mut cuts: Vec<f64> = vec![0.0, upper];
    cuts.extend(syn.times.iter().chain(&real.times).copied().filter(|&t| t > 0.0 && t < upper));
    if horizon < upper {
        cuts.push(horizon);
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let weight_integral = |a: f64, b: f64| -> f64 {
        let ramp_end = b.min(horizon);
        let ramp = if a < ramp_end {
            (ramp_end * ramp_end - a * a) / (2.0 * horizon)
        } else {
            0.0
        };
        ramp + (b - a.max(horizon)).max(0.0)
    };
    cuts.windows(2)
        .map(|w| (syn.eval(w[0]) - real.eval(w[0])) * weight_integral(w[0], w[1]))
        .sum()
}

fn event_curve(data: &SurvivalDataset, which: &'static str) -> Result<StepFunction, SynthError> {
    let observed: Vec<bool> = data.sequences.iter().map(|s| s.event > 0).collect();
    if !observed.iter().any(|&o| o) {
        return Err(SynthError::NoEvents(which));
    }
    Ok(kaplan_meier(&data.durations(), &observed))
}

/// Optimism of `synthetic` against `real` with Kaplan–Meier curves of
/// any-event survival, integrated up to the largest observed time.
pub fn optimism(real: &SurvivalDataset, synthetic: &SurvivalDataset, horizon: f64) -> Result<OptimismReport, SynthError> {
    if !(horizon > 0.0) {
        return Err(SynthError::InvalidConfig(format!("horizon {horizon}")));
    }
    let curve_real = event_curve(real, "real data")?;
    let curve_syn = event_curve(synthetic, "synthetic data")?;
    let upper = real
        .durations()
        .into_iter()
        .chain(synthetic.durations())
        .fold(0.0, f64::max);
    Ok(OptimismReport {
        value: optimism_from_curves(&curve_syn, &curve_real, horizon, upper),
        horizon,
        upper,
        curve_syn,
        curve_real,
    })
}
