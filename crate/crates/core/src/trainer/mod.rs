//! Adam training with annealed task weights and early stopping, K-fold
//! cross-validation, and checkpoint files.

mod adam;
mod checkpoint;
mod config;
mod cv;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC};
pub use config::{GammaSchedule, TrainConfig};
pub use cv::{
    assign_folds, cross_validate, grid_search, mean_std, random_candidates, AggregateRow, Augmentation, CvOptions,
    CvReport, SearchResult,
};

use crate::container::ContainerError;
use crate::dataset::{DatasetError, FeatureSchema, PatientSequence, SurvivalDataset};
use crate::encoder::{EncoderConfig, EncoderError};
use crate::metrics::MetricsError;
use crate::model::{ModelConfig, SurvModel};
use crate::numerics::Gradients;
use crate::par::Execution;
use crate::survival_head::{pch_loss, HazardPrediction, SubjectLabel, TaskWeights};
use crate::timegrid::{fit_time_bins, CensoringDistribution, TimeGrid, TimeGridError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    ConfigSyntax(String),
    #[error("config: {key} = {value} is outside {allowed}")]
    InvalidConfig {
        key: &'static str,
        value: String,
        allowed: String,
    },
    #[error("{0}")]
    Io(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{patients} patients cannot fill {folds} folds")]
    TooFewPatients { patients: usize, folds: usize },
    #[error("data does not match the model: {0}")]
    Incompatible(String),
    #[error("unsupported checkpoint version {found} (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptContainer(String),
    #[error(transparent)]
    TimeGrid(#[from] TimeGridError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<ContainerError> for TrainError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::VersionMismatch { found, supported } => TrainError::VersionMismatch { found, supported },
            ContainerError::Io(e) => TrainError::Io(e.to_string()),
            other => TrainError::CorruptContainer(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

/// Everything needed to predict for new patients.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: SurvModel,
    pub schema: FeatureSchema,
    pub grid: TimeGrid,
    pub config: TrainConfig,
    pub max_visits: usize,
    pub num_events: u32,
    /// Largest training duration; length-of-stay targets are divided by it.
    pub duration_scale: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainedModel {
    pub fn predict(&self, seq: &PatientSequence) -> Result<HazardPrediction, TrainError> {
        Ok(self.model.predict(seq)?)
    }

    /// `S_k(τ)` per event under step interpolation on the grid.
    pub fn survival_at(&self, pred: &HazardPrediction, tau: f64) -> Vec<f64> {
        let b = self.grid.steps_completed(tau);
        pred.survival.iter().map(|s| s[b]).collect()
    }

    pub fn check_compatible(&self, data: &SurvivalDataset) -> Result<(), TrainError> {
        if data.schema != self.schema {
            return Err(TrainError::Incompatible("feature schema differs".into()));
        }
        if data.max_visits != self.max_visits {
            return Err(TrainError::Incompatible(format!(
                "sequence length {} vs {}",
                data.max_visits, self.max_visits
            )));
        }
        if data.num_events > self.num_events {
            return Err(TrainError::Incompatible(format!(
                "{} event types vs {}",
                data.num_events, self.num_events
            )));
        }
        Ok(())
    }

    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,gamma1,gamma2\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.gamma1, r.gamma2
        );
    }
    out
}

pub fn model_config(config: &TrainConfig, input_width: usize, max_visits: usize, bins: usize, num_events: u32) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_width,
            max_visits,
            d_model: config.d_model,
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            d_ff: config.d_ff,
            n_out: config.n_features,
        },
        bins,
        num_events: num_events as usize,
        head_depth: config.head_depth,
    }
}

/// Training targets with IPCW weights from `censoring`, renormalized over
/// this set's uncensored subjects.
pub fn subject_labels(
    data: &SurvivalDataset,
    grid: &TimeGrid,
    censoring: &CensoringDistribution,
    duration_scale: f64,
) -> Vec<SubjectLabel> {
    let (d, e) = (data.durations(), data.events());
    let w = censoring.weights(&d, &e);
    data.sequences
        .iter()
        .zip(w)
        .map(|(s, weight)| SubjectLabel {
            bin: grid.bin_index(s.duration),
            event: s.event,
            weight,
            duration_normalized: (s.duration / duration_scale).min(1.0),
        })
        .collect()
}

/// Mean weighted PCH loss of `model` over `data`.
pub fn mean_pch_loss(
    model: &SurvModel,
    data: &SurvivalDataset,
    labels: &[SubjectLabel],
    exec: Execution,
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = exec.map_range(data.len(), |i| {
        model.predict(&data.sequences[i]).map(|p| pch_loss(&p, &labels[i]))
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}

pub fn train(config: &TrainConfig, train_set: &SurvivalDataset, val_set: &SurvivalDataset) -> Result<TrainedModel, TrainError> {
    train_with(config, train_set, val_set, Execution::default())
}

/// Mini-batch training. Per-subject gradients of a batch are computed
/// under `exec` and summed in subject order, so the result does not depend
/// on the execution mode or thread count.
pub fn train_with(
    config: &TrainConfig,
    train_set: &SurvivalDataset,
    val_set: &SurvivalDataset,
    exec: Execution,
) -> Result<TrainedModel, TrainError> {
    config.validate(true)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if !val_set.is_empty() {
        train_set.same_layout(val_set)?;
    }
    let (d, e) = (train_set.durations(), train_set.events());
    let grid = fit_time_bins(&d, &e, config.bins)?;
    let duration_scale = d.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    let censoring = CensoringDistribution::fit(&d, &e);
    let num_events = train_set.num_events.max(val_set.num_events);
    let mcfg = model_config(
        config,
        train_set.schema.encoded_width(),
        train_set.max_visits,
        grid.n_bins(),
        num_events,
    );
    let mut model = SurvModel::init(mcfg, config.seed)?;
    let train_labels = subject_labels(train_set, &grid, &censoring, duration_scale);
    let val_labels = subject_labels(val_set, &grid, &censoring, duration_scale);

    let mut adam = AdamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, SurvModel)> = None;
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        let g = config.gamma(epoch);
        let gammas = TaskWeights {
            mortality: g,
            length_of_stay: g,
        };
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let results = exec.map(batch, |&i| {
                model.subject_gradient(&train_set.sequences[i], &train_labels[i], gammas)
            });
            let mut sum = Gradients::zeros_like(&model.store);
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                sum.add_scaled(&grads, 1.0);
            }
            if !batch_loss.is_finite() || sum.iter().any(|t| t.data().iter().any(|x| !x.is_finite())) {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += batch_loss;
            model.store.zero_grad();
            model.store.accumulate(&sum, 1.0 / batch.len() as f64);
            adam_step(&mut model.store, &mut adam, config.learning_rate, config.weight_decay);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            mean_pch_loss(&model, val_set, &val_labels, exec)?
        };
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0 });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            gamma1: g,
            gamma2: g,
        });
        if best.as_ref().is_none_or(|(l, _)| val_loss < *l) {
            best = Some((val_loss, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        model = m;
    }
    Ok(TrainedModel {
        model,
        schema: train_set.schema.clone(),
        grid,
        config: config.clone(),
        max_visits: train_set.max_visits,
        num_events,
        duration_scale,
        history,
    })
}

/// Splits real patients into train/validation for early stopping;
/// synthetic patients always stay on the training side.
pub fn early_stopping_split(data: &SurvivalDataset, val_fraction: f64, seed: u64) -> (SurvivalDataset, SurvivalDataset) {
    let real: Vec<usize> = (0..data.len()).filter(|&i| !data.sequences[i].is_synthetic()).collect();
    if val_fraction <= 0.0 || real.len() < 2 {
        return (data.clone(), data.subset(&[]));
    }
    let (_, val_pos) = crate::dataset::partition_indices(real.len(), 1.0 - val_fraction, seed);
    let val: Vec<usize> = val_pos.iter().map(|&p| real[p]).collect();
    let train: Vec<usize> = (0..data.len()).filter(|i| val.binary_search(i).is_err()).collect();
    (data.subset(&train), data.subset(&val))
}
