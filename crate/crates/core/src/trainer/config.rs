use serde::{Deserialize, Serialize};

use super::TrainError;

/// How the auxiliary task weights evolve over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaSchedule {
    /// 1 at epoch 0, falling linearly to 0 at `gamma_decay_fraction · max_epochs`.
    Linear,
    /// Always 1.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub head_depth: usize,
    /// Encoder output width `N`.
    pub n_features: usize,
    pub bins: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub gamma_schedule: GammaSchedule,
    pub gamma_decay_fraction: f64,
    /// Share of real training patients held out for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            n_layers: 2,
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            head_depth: 2,
            n_features: 16,
            bins: crate::timegrid::DEFAULT_BINS,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            gamma_schedule: GammaSchedule::Linear,
            gamma_decay_fraction: 0.5,
            val_fraction: 0.2,
        }
    }
}

fn check(ok: bool, key: &'static str, value: impl ToString, allowed: &str) -> Result<(), TrainError> {
    if ok {
        Ok(())
    } else {
        Err(TrainError::InvalidConfig {
            key,
            value: value.to_string(),
            allowed: allowed.to_string(),
        })
    }
}

impl TrainConfig {
    /// Parses `key = value` lines; unknown keys are rejected and missing
    /// keys take their defaults.
    pub fn parse(text: &str, allow_out_of_range: bool) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::ConfigSyntax(e.message().to_string()))?;
        cfg.validate(allow_out_of_range)?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, allow_out_of_range: bool) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, allow_out_of_range)
    }

    /// Structural checks always apply; the tuning ranges can be waived.
    pub fn validate(&self, allow_out_of_range: bool) -> Result<(), TrainError> {
        check(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate", self.learning_rate, "> 0")?;
        check(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "weight_decay", self.weight_decay, ">= 0")?;
        check(self.n_layers >= 1, "n_layers", self.n_layers, ">= 1")?;
        check(self.d_model >= 2 && self.d_model.is_multiple_of(2), "d_model", self.d_model, "even, >= 2")?;
        check(self.d_ff >= 1, "d_ff", self.d_ff, ">= 1")?;
        check(
            self.n_heads >= 1 && self.d_model.is_multiple_of(self.n_heads),
            "n_heads",
            self.n_heads,
            "a divisor of d_model",
        )?;
        check(matches!(self.head_depth, 1 | 2), "head_depth", self.head_depth, "1 or 2")?;
        check(self.n_features >= 1, "n_features", self.n_features, ">= 1")?;
        check(self.bins >= 1, "bins", self.bins, ">= 1")?;
        check(self.batch_size >= 1, "batch_size", self.batch_size, ">= 1")?;
        check(
            (0.0..=1.0).contains(&self.gamma_decay_fraction) && self.gamma_decay_fraction > 0.0,
            "gamma_decay_fraction",
            self.gamma_decay_fraction,
            "(0, 1]",
        )?;
        check(
            (0.0..1.0).contains(&self.val_fraction),
            "val_fraction",
            self.val_fraction,
            "[0, 1)",
        )?;
        if allow_out_of_range {
            return Ok(());
        }
        check(
            (1e-4..=1e-3).contains(&self.learning_rate),
            "learning_rate",
            self.learning_rate,
            "[1e-4, 1e-3]",
        )?;
        check(self.weight_decay <= 1e-3, "weight_decay", self.weight_decay, "[0, 1e-3]")?;
        check((2..=4).contains(&self.n_layers), "n_layers", self.n_layers, "2..=4")?;
        check(self.d_model == 16, "d_model", self.d_model, "16")?;
        check(matches!(self.d_ff, 32 | 64), "d_ff", self.d_ff, "32 or 64")?;
        check(matches!(self.n_heads, 1 | 2 | 4), "n_heads", self.n_heads, "1, 2 or 4")?;
        check((15..=30).contains(&self.n_features), "n_features", self.n_features, "15..=30")?;
        Ok(())
    }

    /// Sorted `key = value` lines; parses back to an equal config.
    pub fn canonical_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// `(key, TOML value)` pairs in key order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("config serializes");
        let table = value.as_table().expect("config is a table");
        let mut out: Vec<(String, String)> = table.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
        out.sort();
        out
    }

    /// Task weight for `epoch` (0-based), the same for both auxiliary tasks.
    pub fn gamma(&self, epoch: usize) -> f64 {
        match self.gamma_schedule {
            GammaSchedule::Constant => 1.0,
            GammaSchedule::Linear => {
                let span = self.gamma_decay_fraction * self.max_epochs as f64;
                if span <= 0.0 {
                    0.0
                } else {
                    (1.0 - epoch as f64 / span).max(0.0)
                }
            }
        }
    }
}
