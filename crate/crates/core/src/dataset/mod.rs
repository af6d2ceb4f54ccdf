//! Long-format visit records → fixed-length, masked per-patient sequences.

mod csv_io;
mod schema;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::numerics::Tensor;
use crate::timegrid::quantile_sorted;

pub use csv_io::{
    feature_spec_json, load_feature_spec, parse_feature_spec, parse_long_csv, parse_long_csv_reader,
    write_long_csv, FeatureSpec, DURATION_COLUMN, EVENT_COLUMN, ID_COLUMN, TIME_COLUMN, UNKNOWN_LEVEL,
};
pub use schema::{
    encode_categorical, fit_schema, normalize_numerical, CategoricalFeature, FeatureSchema, NumericalFeature,
};

/// Identifier prefix reserved for generated patients.
pub const SYNTHETIC_PREFIX: &str = "syn-";

pub fn is_synthetic(patient_id: &str) -> bool {
    patient_id.starts_with(SYNTHETIC_PREFIX)
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse column `{column}` value {value:?}")]
    ParseFailure { row: usize, column: String, value: String },
    #[error("patient `{0}` has conflicting (duration, event) labels")]
    InconsistentLabel(String),
    #[error("patient `{patient_id}` has two visits at time {visit_time}")]
    DuplicateVisitTime { patient_id: String, visit_time: f64 },
    #[error("numerical feature `{0}` has no positive maximum")]
    DegenerateFeature(String),
    #[error("patient `{0}` has no visit rows")]
    EmptyPatient(String),
    #[error("table has no rows")]
    EmptyTable,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numerical,
    Categorical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureColumn {
    pub fn new(name: impl Into<String>, kind: FeatureKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    /// `None` marks a missing value, imputed with the training mean.
    Num(Option<f64>),
    Cat(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRow {
    pub patient_id: String,
    pub visit_time: f64,
    pub duration: f64,
    pub event: u32,
    /// Aligned with [`RawTable::features`].
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub features: Vec<FeatureColumn>,
    pub rows: Vec<RawRow>,
}

impl RawTable {
    /// Distinct patient ids in order of first appearance.
    pub fn patient_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.rows
            .iter()
            .map(|r| r.patient_id.as_str())
            .filter(|id| seen.insert(*id))
            .collect()
    }

    pub fn visit_counts(&self) -> Vec<usize> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in &self.rows {
            *counts.entry(&r.patient_id).or_default() += 1;
        }
        self.patient_ids().iter().map(|id| counts[id]).collect()
    }

    /// Patient-level split with the same assignment rule as [`split_dataset`].
    pub fn split_patients(&self, train_fraction: f64, seed: u64) -> (RawTable, RawTable) {
        let ids = self.patient_ids();
        let (train_idx, _) = partition_indices(ids.len(), train_fraction, seed);
        let train_ids: HashSet<&str> = train_idx.iter().map(|&i| ids[i]).collect();
        let (train, test): (Vec<RawRow>, Vec<RawRow>) = self
            .rows
            .iter()
            .cloned()
            .partition(|r| train_ids.contains(r.patient_id.as_str()));
        (
            RawTable {
                features: self.features.clone(),
                rows: train,
            },
            RawTable {
                features: self.features.clone(),
                rows: test,
            },
        )
    }
}

/// One patient's encoded visits, padded or truncated to `V` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientSequence {
    pub patient_id: String,
    /// `V × encoded_width`; rows at and after `n_real` are zero.
    pub visits: Tensor,
    /// Times of the real visits, ascending.
    pub visit_times: Vec<f64>,
    pub n_real: usize,
    pub duration: f64,
    pub event: u32,
}

impl PatientSequence {
    pub fn max_visits(&self) -> usize {
        self.visits.dims2().0
    }

    /// Left-aligned `{0, 1}` mask, 1 for real visits.
    pub fn mask(&self) -> Vec<f64> {
        (0..self.max_visits()).map(|i| if i < self.n_real { 1.0 } else { 0.0 }).collect()
    }

    pub fn is_synthetic(&self) -> bool {
        is_synthetic(&self.patient_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalDataset {
    pub schema: FeatureSchema,
    pub sequences: Vec<PatientSequence>,
    pub max_visits: usize,
    pub num_events: u32,
}

impl SurvivalDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn durations(&self) -> Vec<f64> {
        self.sequences.iter().map(|s| s.duration).collect()
    }

    pub fn events(&self) -> Vec<u32> {
        self.sequences.iter().map(|s| s.event).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.sequences.iter().map(|s| s.patient_id.as_str()).collect()
    }

    pub fn total_visits(&self) -> usize {
        self.sequences.iter().map(|s| s.n_real).sum()
    }

    /// A dataset sharing this one's schema and shape over selected sequences.
    pub fn subset(&self, indices: &[usize]) -> SurvivalDataset {
        SurvivalDataset {
            schema: self.schema.clone(),
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            max_visits: self.max_visits,
            num_events: self.num_events,
        }
    }

    /// Checks the sequence invariants: common shape, left-aligned mask,
    /// zero padding, ascending visit times and event labels in range.
    pub fn check_invariants(&self) -> Result<(), String> {
        let width = self.schema.encoded_width();
        if self.num_events < 1 {
            return Err("num_events must be at least 1".into());
        }
        for s in &self.sequences {
            if s.visits.dims2() != (self.max_visits, width) {
                return Err(format!("{}: shape {:?}", s.patient_id, s.visits.shape()));
            }
            if s.n_real == 0 || s.n_real > self.max_visits || s.visit_times.len() != s.n_real {
                return Err(format!("{}: n_real {}", s.patient_id, s.n_real));
            }
            if (s.n_real..self.max_visits).any(|r| s.visits.row_slice(r).iter().any(|&x| x != 0.0)) {
                return Err(format!("{}: non-zero padding", s.patient_id));
            }
            if s.visit_times.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("{}: visit times not ascending", s.patient_id));
            }
            if s.event > self.num_events {
                return Err(format!("{}: event {} > {}", s.patient_id, s.event, self.num_events));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> DatasetSummary {
        let n = self.len().max(1) as f64;
        let events = self.sequences.iter().filter(|s| s.event > 0).count() as f64;
        let d = self.durations();
        DatasetSummary {
            n_patients: self.len(),
            n_visits: self.total_visits(),
            n_num: self.schema.n_num(),
            n_cat: self.schema.n_cat(),
            max_visits: self.max_visits,
            event_pct: 100.0 * events / n,
            censored_pct: 100.0 * (n - events) / n,
            duration_min: d.iter().copied().fold(f64::INFINITY, f64::min),
            duration_max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            duration_mean: d.iter().sum::<f64>() / n,
        }
    }

    /// Keeps only the most recent real visit of every patient (`V = 1`).
    pub fn last_visit_only(&self) -> SurvivalDataset {
        let width = self.schema.encoded_width();
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                let last = s.n_real - 1;
                PatientSequence {
                    patient_id: s.patient_id.clone(),
                    visits: Tensor::matrix(1, width, s.visits.row_slice(last).to_vec()).unwrap(),
                    visit_times: vec![s.visit_times[last]],
                    n_real: 1,
                    duration: s.duration,
                    event: s.event,
                }
            })
            .collect();
        SurvivalDataset {
            schema: self.schema.clone(),
            sequences,
            max_visits: 1,
            num_events: self.num_events,
        }
    }

    pub fn same_layout(&self, other: &SurvivalDataset) -> Result<(), DatasetError> {
        if self.schema != other.schema {
            return Err(DatasetError::SchemaMismatch("feature schemas differ".into()));
        }
        if self.max_visits != other.max_visits {
            return Err(DatasetError::SchemaMismatch(format!(
                "max visits {} vs {}",
                self.max_visits, other.max_visits
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSummary {
    pub n_patients: usize,
    pub n_visits: usize,
    pub n_num: usize,
    pub n_cat: usize,
    pub max_visits: usize,
    pub event_pct: f64,
    pub censored_pct: f64,
    pub duration_min: f64,
    pub duration_max: f64,
    pub duration_mean: f64,
}

/// Default `V`: the 95th percentile of per-patient visit counts, rounded up.
pub fn default_max_visits(table: &RawTable) -> usize {
    let mut counts: Vec<f64> = table.visit_counts().into_iter().map(|c| c as f64).collect();
    if counts.is_empty() {
        return 1;
    }
    counts.sort_by(f64::total_cmp);
    (quantile_sorted(&counts, 0.95).ceil() as usize).max(1)
}

fn encode_row(row: &RawRow, columns: &[Option<usize>], schema: &FeatureSchema, out: &mut [f64]) {
    let offsets = schema.categorical_offsets();
    for (j, f) in schema.numerical.iter().enumerate() {
        let x = match columns[j].map(|c| &row.cells[c]) {
            Some(Cell::Num(Some(x))) => *x,
            _ => f.mean,
        };
        out[j] = normalize_numerical(x, f.max);
    }
    for (c, f) in schema.categorical.iter().enumerate() {
        if let Some(Cell::Cat(level)) = columns[schema.n_num() + c].map(|col| &row.cells[col]) {
            let block = encode_categorical(level, &f.vocabulary);
            out[offsets[c]..offsets[c] + block.len()].copy_from_slice(&block);
        }
    }
}

/// Groups rows by patient (first-appearance order), sorts visits by time,
/// keeps the earliest `max_visits` and zero-pads the rest.
pub fn assemble_sequences(
    table: &RawTable,
    schema: &FeatureSchema,
    max_visits: usize,
) -> Result<SurvivalDataset, DatasetError> {
    assert!(max_visits >= 1, "max_visits must be at least 1");
    table.validate()?;
    // schema feature index → table column
    let columns: Vec<Option<usize>> = schema
        .feature_kinds()
        .iter()
        .map(|(name, kind)| table.features.iter().position(|f| &f.name == name && f.kind == *kind))
        .collect();
    if let Some(i) = columns.iter().position(Option::is_none) {
        return Err(DatasetError::MissingColumn(schema.feature_kinds()[i].0.clone()));
    }

    let mut by_patient: HashMap<&str, Vec<&RawRow>> = HashMap::new();
    for row in &table.rows {
        by_patient.entry(&row.patient_id).or_default().push(row);
    }
    let width = schema.encoded_width();
    let mut sequences = Vec::with_capacity(by_patient.len());
    let mut num_events = 1;
    for id in table.patient_ids() {
        let mut rows = by_patient.remove(id).unwrap_or_default();
        if rows.is_empty() {
            return Err(DatasetError::EmptyPatient(id.to_string()));
        }
        rows.sort_by(|a, b| a.visit_time.total_cmp(&b.visit_time));
        rows.truncate(max_visits);
        let mut visits = Tensor::zeros(&[max_visits, width]);
        for (v, row) in rows.iter().enumerate() {
            encode_row(row, &columns, schema, &mut visits.data_mut()[v * width..(v + 1) * width]);
        }
        num_events = num_events.max(rows[0].event);
        sequences.push(PatientSequence {
            patient_id: id.to_string(),
            visits,
            visit_times: rows.iter().map(|r| r.visit_time).collect(),
            n_real: rows.len(),
            duration: rows[0].duration,
            event: rows[0].event,
        });
    }
    Ok(SurvivalDataset {
        schema: schema.clone(),
        sequences,
        max_visits,
        num_events,
    })
}

/// Seeded shuffle of `0..n`; the first `round(fraction · n)` (kept within
/// `1..n` when `n ≥ 2`) go to the first side. Both sides come back sorted.
pub fn partition_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut k = (fraction * n as f64).round() as usize;
    if n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let (a, b) = order.split_at(k.min(n));
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

pub fn split_dataset(dataset: &SurvivalDataset, train_fraction: f64, seed: u64) -> (SurvivalDataset, SurvivalDataset) {
    assert!(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction must lie in (0, 1)");
    let (train, test) = partition_indices(dataset.len(), train_fraction, seed);
    (dataset.subset(&train), dataset.subset(&test))
}

const DATASET_MAGIC: &[u8; 8] = b"SSQDATA\0";
pub const DATASET_FORMAT_VERSION: u32 = 1;

impl SurvivalDataset {
    pub fn to_container(&self) -> Container {
        let n = self.len();
        let (v, w) = (self.max_visits, self.schema.encoded_width());
        let mut c = Container::new();
        c.set("format", "survseq-dataset");
        c.set("schema", self.schema.to_json());
        c.set("max_visits", v);
        c.set("num_events", self.num_events);
        c.set("n_patients", n);
        c.set("ids", serde_json::to_string(&self.ids()).unwrap());
        let mut visits = Vec::with_capacity(n * v * w);
        let mut times = vec![0.0; n * v];
        for (i, s) in self.sequences.iter().enumerate() {
            visits.extend_from_slice(s.visits.data());
            times[i * v..i * v + s.n_real].copy_from_slice(&s.visit_times);
        }
        c.push_array("visits", Tensor::new(vec![n, v, w], visits).unwrap());
        c.push_array("visit_times", Tensor::new(vec![n, v], times).unwrap());
        let col = |f: &dyn Fn(&PatientSequence) -> f64| Tensor::new(vec![n], self.sequences.iter().map(f).collect());
        c.push_array("n_real", col(&|s| s.n_real as f64).unwrap());
        c.push_array("duration", col(&|s| s.duration).unwrap());
        c.push_array("event", col(&|s| s.event as f64).unwrap());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, DatasetError> {
        let corrupt = |m: &str| DatasetError::Container(ContainerError::Corrupt(m.to_string()));
        if c.get("format")? != "survseq-dataset" {
            return Err(corrupt("not a dataset container"));
        }
        let schema = FeatureSchema::from_json(c.get("schema")?)?;
        let max_visits: usize = c.parse("max_visits")?;
        let num_events: u32 = c.parse("num_events")?;
        let ids: Vec<String> = serde_json::from_str(c.get("ids")?).map_err(|_| corrupt("ids"))?;
        let n = ids.len();
        let w = schema.encoded_width();
        let visits = c.array("visits")?;
        let times = c.array("visit_times")?;
        let (n_real, duration, event) = (c.array("n_real")?, c.array("duration")?, c.array("event")?);
        if visits.shape() != [n, max_visits, w]
            || times.shape() != [n, max_visits]
            || [n_real, duration, event].iter().any(|t| t.shape() != [n])
        {
            return Err(corrupt("array shapes disagree with header"));
        }
        let block = max_visits * w;
        let sequences = ids
            .into_iter()
            .enumerate()
            .map(|(i, patient_id)| {
                let nr = n_real.data()[i] as usize;
                if nr == 0 || nr > max_visits {
                    return Err(corrupt("n_real out of range"));
                }
                Ok(PatientSequence {
                    patient_id,
                    visits: Tensor::matrix(max_visits, w, visits.data()[i * block..(i + 1) * block].to_vec()).unwrap(),
                    visit_times: times.data()[i * max_visits..i * max_visits + nr].to_vec(),
                    n_real: nr,
                    duration: duration.data()[i],
                    event: event.data()[i] as u32,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SurvivalDataset {
            schema,
            sequences,
            max_visits,
            num_events,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        Ok(self.to_container().write_file(path, DATASET_MAGIC, DATASET_FORMAT_VERSION)?)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::from_container(&Container::read_file(path, DATASET_MAGIC, DATASET_FORMAT_VERSION)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes(DATASET_MAGIC, DATASET_FORMAT_VERSION)
    }
}
