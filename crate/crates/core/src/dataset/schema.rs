use serde::{Deserialize, Serialize};

use super::{Cell, DatasetError, FeatureKind, RawTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericalFeature {
    pub name: String,
    /// Training maximum `M`; values are encoded as `x / M`.
    pub max: f64,
    /// Training mean, used in place of missing cells.
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub vocabulary: Vec<String>,
}

/// Frozen encoding statistics. The encoded row layout is
/// `[numericals | one-hot block per categorical]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub numerical: Vec<NumericalFeature>,
    pub categorical: Vec<CategoricalFeature>,
}

impl FeatureSchema {
    pub fn n_num(&self) -> usize {
        self.numerical.len()
    }

    pub fn n_cat(&self) -> usize {
        self.categorical.len()
    }

    pub fn encoded_width(&self) -> usize {
        self.n_num() + self.categorical.iter().map(|c| c.vocabulary.len()).sum::<usize>()
    }

    /// Column offset of each categorical block inside an encoded row.
    pub fn categorical_offsets(&self) -> Vec<usize> {
        let mut offset = self.n_num();
        self.categorical
            .iter()
            .map(|c| {
                let o = offset;
                offset += c.vocabulary.len();
                o
            })
            .collect()
    }

    pub fn feature_kinds(&self) -> Vec<(String, FeatureKind)> {
        self.numerical
            .iter()
            .map(|f| (f.name.clone(), FeatureKind::Numerical))
            .chain(self.categorical.iter().map(|f| (f.name.clone(), FeatureKind::Categorical)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schema serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, DatasetError> {
        serde_json::from_str(s).map_err(|e| DatasetError::Format(format!("schema: {e}")))
    }
}

/// Fits maxima, means and sorted vocabularies on `table`.
pub fn fit_schema(table: &RawTable) -> Result<FeatureSchema, DatasetError> {
    if table.rows.is_empty() {
        return Err(DatasetError::EmptyTable);
    }
    let mut numerical = Vec::new();
    let mut categorical = Vec::new();
    for (col, feature) in table.features.iter().enumerate() {
        match feature.kind {
            FeatureKind::Numerical => {
                let values: Vec<f64> = table
                    .rows
                    .iter()
                    .filter_map(|r| match &r.cells[col] {
                        Cell::Num(v) => *v,
                        Cell::Cat(_) => None,
                    })
                    .collect();
                let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if values.is_empty() || max <= 0.0 {
                    return Err(DatasetError::DegenerateFeature(feature.name.clone()));
                }
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                numerical.push(NumericalFeature {
                    name: feature.name.clone(),
                    max,
                    mean,
                });
            }
            FeatureKind::Categorical => {
                let mut vocabulary: Vec<String> = table
                    .rows
                    .iter()
                    .filter_map(|r| match &r.cells[col] {
                        Cell::Cat(s) => Some(s.clone()),
                        Cell::Num(_) => None,
                    })
                    .collect();
                vocabulary.sort();
                vocabulary.dedup();
                categorical.push(CategoricalFeature {
                    name: feature.name.clone(),
                    vocabulary,
                });
            }
        }
    }
    Ok(FeatureSchema { numerical, categorical })
}

/// `x / M`. Values above the training maximum pass through unclipped.
pub fn normalize_numerical(x: f64, max: f64) -> f64 {
    debug_assert!(max > 0.0);
    x / max
}

/// One-hot vector over `vocabulary`; all zeros for unseen values.
pub fn encode_categorical(value: &str, vocabulary: &[String]) -> Vec<f64> {
    let mut out = vec![0.0; vocabulary.len()];
    if let Ok(i) = vocabulary.binary_search_by(|v| v.as_str().cmp(value)) {
        out[i] = 1.0;
    } else if let Some(i) = vocabulary.iter().position(|v| v == value) {
        // unsorted vocabularies built by hand
        out[i] = 1.0;
    }
    out
}
