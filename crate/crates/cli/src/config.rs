use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use acdkit::acda::AcdaConfig;
use acdkit::linalg::Ridge;
use acdkit::neural::{NetworkShape, OutputActivation, TrainConfig};

use crate::CliError;

/// Everything `detect` and `sweep` can be told, as one flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Outer hidden width; derived from the band count when absent.
    pub h1: Option<usize>,
    /// Bottleneck width; derived from the band count when absent.
    pub h2: Option<usize>,
    pub output_activation: OutputActivation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub sample_count: Option<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub standardize: bool,
    /// Diagonal loading before inversions, relative to the mean eigenvalue
    /// unless `ridge_absolute` is set.
    pub ridge: f64,
    pub ridge_absolute: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        DetectConfig {
            h1: None,
            h2: None,
            output_activation: OutputActivation::Linear,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            l2_lambda: t.l2_lambda,
            sample_count: None,
            repeats: 10,
            seed: 0,
            standardize: true,
            ridge: 1e-6,
            ridge_absolute: false,
        }
    }
}

impl DetectConfig {
    pub fn ridge(&self) -> Ridge {
        if self.ridge_absolute {
            Ridge::Absolute(self.ridge)
        } else {
            Ridge::Relative(self.ridge)
        }
    }

    pub fn acda(&self, bands: usize, sequential: bool) -> Result<AcdaConfig, CliError> {
        let (h1, h2) = match (self.h1, self.h2) {
            (Some(a), Some(b)) => (a, b),
            (None, None) => acdkit::neural::scaled_hidden(bands)?,
            _ => return Err(CliError::Config("set both h1 and h2, or neither".into())),
        };
        let shape =
            NetworkShape::acda(bands, h1, h2)?.with_output_activation(self.output_activation);
        let cfg = AcdaConfig {
            shape,
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
                l2_lambda: self.l2_lambda,
                ..TrainConfig::default()
            },
            sample_count: self.sample_count,
            repeats: self.repeats,
            base_seed: self.seed,
            ridge: self.ridge(),
            standardize: self.standardize,
            sequential,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies `key=value` overrides to a JSON object. Values are read as JSON
/// when they parse, otherwise taken as strings.
pub fn apply_overrides(base: &mut Map<String, Value>, sets: &[String]) -> Result<(), CliError> {
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(CliError::Config(format!("override `{s}` has an empty key")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        base.insert(key.to_string(), value);
    }
    Ok(())
}

pub fn parse_object(text: &str, what: &str) -> Result<Map<String, Value>, CliError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::Config(format!("{what} must be a JSON object"))),
        Err(e) => Err(CliError::Config(format!("{what}: {e}"))),
    }
}

pub fn from_object<T: serde::de::DeserializeOwned>(
    obj: Map<String, Value>,
    what: &str,
) -> Result<T, CliError> {
    serde_json::from_value(Value::Object(obj)).map_err(|e| CliError::Config(format!("{what}: {e}")))
}
