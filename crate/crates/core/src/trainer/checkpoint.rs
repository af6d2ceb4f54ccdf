use std::path::Path;

use super::{model_config, EpochRecord, TrainConfig, TrainError, TrainedModel};
use crate::container::Container;
use crate::dataset::FeatureSchema;
use crate::model::SurvModel;
use crate::numerics::Tensor;
use crate::timegrid::TimeGrid;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSQCKPT\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param.";
const CONFIG_PREFIX: &str = "config.";

impl TrainedModel {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set("format", "survseq-checkpoint");
        for (k, v) in self.config.entries() {
            c.set(format!("{CONFIG_PREFIX}{k}"), v);
        }
        c.set("schema", self.schema.to_json());
        c.set("max_visits", self.max_visits);
        c.set("num_events", self.num_events);
        c.set("duration_scale", self.duration_scale);
        c.push_array("timegrid", Tensor::row(self.grid.boundaries().to_vec()));
        let rows: Vec<Vec<f64>> = self
            .history
            .iter()
            .map(|r| vec![r.epoch as f64, r.train_loss, r.val_loss, r.gamma1, r.gamma2])
            .collect();
        let history = if rows.is_empty() {
            Tensor::zeros(&[0, 5])
        } else {
            Tensor::from_rows(&rows).expect("rectangular history")
        };
        c.push_array("history", history);
        for (_, p) in self.model.store.iter() {
            c.push_array(format!("{PARAM_PREFIX}{}", p.name), p.value.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, TrainError> {
        let corrupt = |m: String| TrainError::CorruptContainer(m);
        let config_text: String = c
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(CONFIG_PREFIX).map(|k| format!("{k} = {v}\n")))
            .collect();
        let config = TrainConfig::parse(&config_text, true).map_err(|e| corrupt(e.to_string()))?;
        let schema = FeatureSchema::from_json(c.get("schema")?).map_err(|e| corrupt(e.to_string()))?;
        let max_visits: usize = c.parse("max_visits")?;
        let num_events: u32 = c.parse("num_events")?;
        let duration_scale: f64 = c.parse("duration_scale")?;
        let grid = TimeGrid::new(c.array("timegrid")?.data().to_vec()).map_err(|e| corrupt(e.to_string()))?;

        let h = c.array("history")?;
        if h.shape().len() != 2 || h.shape()[1] != 5 {
            return Err(corrupt(format!("history shape {:?}", h.shape())));
        }
        let history = (0..h.shape()[0])
            .map(|r| {
                let row = h.row_slice(r);
                EpochRecord {
                    epoch: row[0] as usize,
                    train_loss: row[1],
                    val_loss: row[2],
                    gamma1: row[3],
                    gamma2: row[4],
                }
            })
            .collect();

        let mcfg = model_config(&config, schema.encoded_width(), max_visits, grid.n_bins(), num_events);
        let mut model = SurvModel::init(mcfg, config.seed).map_err(|e| corrupt(e.to_string()))?;
        let expected = model.store.len();
        let stored = c.arrays.iter().filter(|(n, _)| n.starts_with(PARAM_PREFIX)).count();
        if stored != expected {
            return Err(corrupt(format!("{stored} parameter arrays, model has {expected}")));
        }
        for p in model.store.iter_mut() {
            let t = c.array(&format!("{PARAM_PREFIX}{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(corrupt(format!("{}: shape {:?} vs {:?}", p.name, t.shape(), p.value.shape())));
            }
            p.value = t.clone();
        }
        Ok(Self {
            model,
            schema,
            grid,
            config,
            max_visits,
            num_events,
            duration_scale,
            history,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes(CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        Self::from_container(&Container::from_bytes(bytes, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self
            .to_container()
            .write_file(path, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_container(&Container::read_file(path, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::trainer::{early_stopping_split, train};

    fn trained() -> TrainedModel {
        let data = fixtures::toy30();
        let (tr, va) = early_stopping_split(&data, 0.2, 0);
        let cfg = TrainConfig {
            d_model: 4,
            d_ff: 8,
            n_layers: 1,
            n_features: 3,
            bins: 3,
            max_epochs: 2,
            batch_size: 10,
            ..TrainConfig::default()
        };
        train(&cfg, &tr, &va).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = trained();
        let back = TrainedModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        let data = fixtures::toy30();
        for s in &data.sequences {
            assert_eq!(back.predict(s).unwrap(), m.predict(s).unwrap());
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = trained().to_bytes();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                TrainedModel::from_bytes(&bytes[..cut]),
                Err(TrainError::CorruptContainer(_))
            ));
        }
    }

    #[test]
    fn other_version_rejected() {
        let c = trained().to_container();
        let bytes = c.to_bytes(CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION + 1);
        assert!(matches!(
            TrainedModel::from_bytes(&bytes),
            Err(TrainError::VersionMismatch { found: 2, supported: 1 })
        ));
    }
}
