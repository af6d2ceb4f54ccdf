use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use super::{Cell, DatasetError, FeatureColumn, FeatureKind, FeatureSchema, RawRow, RawTable, SurvivalDataset};

/// Column name → feature kind, as stored in the JSON sidecar file.
pub type FeatureSpec = BTreeMap<String, FeatureKind>;

pub const ID_COLUMN: &str = "patient_id";
pub const TIME_COLUMN: &str = "visit_time";
pub const DURATION_COLUMN: &str = "duration";
pub const EVENT_COLUMN: &str = "event";

/// Written for categorical blocks with no active level when exporting.
pub const UNKNOWN_LEVEL: &str = "<unk>";

pub fn load_feature_spec(path: &Path) -> Result<FeatureSpec, DatasetError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DatasetError::Io(format!("{}: {e}", path.display())))?;
    parse_feature_spec(&text)
}

pub fn parse_feature_spec(text: &str) -> Result<FeatureSpec, DatasetError> {
    serde_json::from_str(text).map_err(|e| DatasetError::Format(format!("feature spec: {e}")))
}

pub fn feature_spec_json(schema: &FeatureSchema) -> String {
    let spec: FeatureSpec = schema.feature_kinds().into_iter().collect();
    serde_json::to_string_pretty(&spec).expect("spec serializes")
}

pub fn parse_long_csv(path: &Path, spec: &FeatureSpec) -> Result<RawTable, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::Io(format!("{}: {e}", path.display())))?;
    parse_long_csv_reader(file, spec)
}

pub fn parse_long_csv_reader<R: Read>(reader: R, spec: &FeatureSpec) -> Result<RawTable, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| DatasetError::Format(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let id_col = column(ID_COLUMN)?;
    let time_col = column(TIME_COLUMN)?;
    let dur_col = column(DURATION_COLUMN)?;
    let event_col = column(EVENT_COLUMN)?;
    for name in spec.keys() {
        column(name)?;
    }
    // Features keep the file's column order.
    let features: Vec<(usize, FeatureColumn)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| spec.get(h).map(|&kind| (i, FeatureColumn::new(h, kind))))
        .collect();

    let mut rows = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let row_no = idx + 1;
        let record = record.map_err(|e| DatasetError::Format(format!("row {row_no}: {e}")))?;
        let field = |col: usize| record.get(col).unwrap_or("");
        let fail = |col: usize| DatasetError::ParseFailure {
            row: row_no,
            column: headers.get(col).unwrap_or("?").to_string(),
            value: field(col).to_string(),
        };
        let number = |col: usize| -> Result<f64, DatasetError> {
            field(col).parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| fail(col))
        };

        let patient_id = field(id_col).to_string();
        if patient_id.is_empty() {
            return Err(fail(id_col));
        }
        let visit_time = number(time_col)?;
        if visit_time < 0.0 {
            return Err(fail(time_col));
        }
        let duration = number(dur_col)?;
        if duration <= 0.0 {
            return Err(fail(dur_col));
        }
        let event: u32 = field(event_col).parse().map_err(|_| fail(event_col))?;

        let mut cells = Vec::with_capacity(features.len());
        for (col, feature) in &features {
            let raw = field(*col);
            let cell = match feature.kind {
                FeatureKind::Numerical if raw.is_empty() || raw.eq_ignore_ascii_case("na") => Cell::Num(None),
                FeatureKind::Numerical => Cell::Num(Some(number(*col)?)),
                FeatureKind::Categorical if raw.is_empty() => return Err(fail(*col)),
                FeatureKind::Categorical => Cell::Cat(raw.to_string()),
            };
            cells.push(cell);
        }
        rows.push(RawRow {
            patient_id,
            visit_time,
            duration,
            event,
            cells,
        });
    }

    let table = RawTable {
        features: features.into_iter().map(|(_, f)| f).collect(),
        rows,
    };
    table.validate()?;
    Ok(table)
}

/// Writes real visit rows back to long CSV, undoing normalization and
/// one-hot encoding. The output re-ingests with [`parse_long_csv`] and the
/// spec from [`feature_spec_json`].
pub fn write_long_csv<W: Write>(dataset: &SurvivalDataset, writer: W) -> Result<(), DatasetError> {
    let schema = &dataset.schema;
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![ID_COLUMN, TIME_COLUMN, DURATION_COLUMN, EVENT_COLUMN];
    header.extend(schema.numerical.iter().map(|f| f.name.as_str()));
    header.extend(schema.categorical.iter().map(|f| f.name.as_str()));
    wtr.write_record(&header).map_err(|e| DatasetError::Io(e.to_string()))?;

    let offsets = schema.categorical_offsets();
    for seq in &dataset.sequences {
        for v in 0..seq.n_real {
            let row = seq.visits.row_slice(v);
            let mut record = vec![
                seq.patient_id.clone(),
                seq.visit_times[v].to_string(),
                seq.duration.to_string(),
                seq.event.to_string(),
            ];
            for (j, f) in schema.numerical.iter().enumerate() {
                record.push((row[j] * f.max).to_string());
            }
            for (c, f) in schema.categorical.iter().enumerate() {
                let block = &row[offsets[c]..offsets[c] + f.vocabulary.len()];
                let level = block
                    .iter()
                    .position(|&x| x > 0.5)
                    .map_or(UNKNOWN_LEVEL, |i| f.vocabulary[i].as_str());
                record.push(level.to_string());
            }
            wtr.write_record(&record).map_err(|e| DatasetError::Io(e.to_string()))?;
        }
    }
    wtr.flush().map_err(|e| DatasetError::Io(e.to_string()))?;
    Ok(())
}

impl RawTable {
    /// Checks per-patient label consistency and distinct visit times.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut labels: HashMap<&str, (f64, u32)> = HashMap::new();
        let mut times: HashMap<&str, Vec<f64>> = HashMap::new();
        for row in &self.rows {
            if row.patient_id.is_empty() {
                return Err(DatasetError::EmptyPatient(row.patient_id.clone()));
            }
            let label = (row.duration, row.event);
            if *labels.entry(&row.patient_id).or_insert(label) != label {
                return Err(DatasetError::InconsistentLabel(row.patient_id.clone()));
            }
            let seen = times.entry(&row.patient_id).or_default();
            if seen.contains(&row.visit_time) {
                return Err(DatasetError::DuplicateVisitTime {
                    patient_id: row.patient_id.clone(),
                    visit_time: row.visit_time,
                });
            }
            seen.push(row.visit_time);
        }
        Ok(())
    }
}
