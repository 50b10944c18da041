//! JSON checkpoints holding the model config, node layout, normalization
//! statistics and every parameter tensor by name.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, SplitOrder};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::train::TrainConfig;

pub const FORMAT: &str = "sdstm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    pub node_ids: Vec<String>,
    #[serde(default)]
    pub stats: Option<NormStats>,
    /// Adjacency self-loop mixing the model was trained with.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub split_order: Option<SplitOrder>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        node_ids: Vec<String>,
        stats: Option<NormStats>,
        train: Option<TrainConfig>,
    ) -> Result<Self> {
        if node_ids.len() != model.nodes() {
            return Err(Error::Config(format!(
                "{} node ids for a {}-node model",
                node_ids.len(),
                model.nodes()
            )));
        }
        let params = model
            .store()
            .iter()
            .map(|(_, name, t)| ParamRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Ok(Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model: model.config().clone(),
            train,
            node_ids,
            stats,
            alpha: None,
            split_order: None,
            params,
        })
    }

    /// Rebuilds the model. Every stored tensor must match the layout the
    /// config produces, name for name and shape for shape.
    pub fn to_model(&self) -> Result<Model> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = Model::new(self.model.clone(), self.node_ids.len(), 0)?;
        let store = model.store_mut();
        if store.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store
                .find(&p.name)
                .ok_or_else(|| Error::Data(format!("unknown parameter {}", p.name)))?;
            store
                .set_values(id, &p.shape, &p.values)
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }
}
