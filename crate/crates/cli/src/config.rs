//! Flat JSON run configuration: file values, then flag overrides, then
//! derived defaults (`lookback = 2 · horizon`, segment length from both).

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use sdstm_core::data::SplitOrder;
use sdstm_core::model::ModelConfig;
use sdstm_core::train::TrainConfig;
use sdstm_core::Error;

pub const DEFAULT_HORIZON: usize = 24;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub alpha: f64,
    pub split_order: SplitOrder,
}

pub type Keys = Map<String, Value>;

fn object(v: Value, what: &str) -> Result<Keys, Error> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config(format!("{what} must be a JSON object"))),
    }
}

fn keys_of<T: serde::Serialize>(v: &T) -> Keys {
    object(serde_json::to_value(v).expect("config serializes"), "config").expect("config is an object")
}

pub fn read_file(path: &Path) -> Result<Keys, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    object(v, &path.display().to_string())
}

fn take<T: serde::de::DeserializeOwned>(keys: &Keys, name: &str) -> Result<Option<T>, Error> {
    keys.get(name)
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("{name}: {e}"))))
        .transpose()
}

fn overlay<T>(base: &T, keys: &Keys) -> Result<T, Error>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut merged = keys_of(base);
    for (k, v) in keys {
        if merged.contains_key(k) {
            merged.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    /// Resolves `keys` (file merged with flags) into a validated config.
    /// Unknown keys are rejected.
    pub fn resolve(keys: &Keys) -> Result<Self, Error> {
        let horizon = take(keys, "horizon")?.unwrap_or(DEFAULT_HORIZON);
        let lookback = take(keys, "lookback")?.unwrap_or(2 * horizon);
        let model_base = ModelConfig::new(lookback, horizon);
        let train_base = TrainConfig::default();
        let (model_keys, train_keys) = (keys_of(&model_base), keys_of(&train_base));
        let unknown: Vec<&str> = keys
            .keys()
            .map(String::as_str)
            .filter(|k| !model_keys.contains_key(*k) && !train_keys.contains_key(*k))
            .filter(|k| !matches!(*k, "alpha" | "split_order"))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg = RunConfig {
            model: overlay(&model_base, keys)?,
            train: overlay(&train_base, keys)?,
            alpha: take(keys, "alpha")?.unwrap_or(DEFAULT_ALPHA),
            split_order: take(keys, "split_order")?.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// Every effective setting as one flat object.
    pub fn to_keys(&self) -> Keys {
        let mut all = keys_of(&self.model);
        all.extend(keys_of(&self.train));
        all.insert("alpha".into(), self.alpha.into());
        all.insert("split_order".into(), serde_json::to_value(self.split_order).expect("serializes"));
        all
    }
}

/// Model keys set in `keys` that disagree with `model`.
pub fn model_conflicts(keys: &Keys, model: &ModelConfig) -> Vec<String> {
    let current = keys_of(model);
    keys.iter()
        .filter(|(k, v)| current.get(*k).is_some_and(|c| c != *v))
        .map(|(k, v)| format!("{k}={v} (checkpoint has {})", current[k]))
        .collect()
}
