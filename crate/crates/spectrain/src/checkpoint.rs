//! Model checkpoints.
//!
//! A checkpoint is one JSON document:
//!
//! ```text
//! {
//!   "format": "spectrain-checkpoint",
//!   "version": 1,
//!   "stage": "pretrain" | "finetune",
//!   "config": { ...effective run config... },
//!   "model_config": { "input_dim", "hidden_dim", "gin_layers", "update_layers",
//!                     "dropout", "eigen_head", "downstream" },
//!   "params": [ { "name": "gin.0.eps", "rows": 1, "cols": 1, "values": [0.0] }, ... ],
//!   "train_state": { "optimizer": { "step", "m", "v" }, "scheduler": {...},
//!                    "epoch": 12, "record": { "rows": [...], ... } }
//! }
//! ```
//!
//! `values` are row-major. Floats are written in shortest round-trip form and
//! parsed exactly, so save → load reproduces every bit. Optimizer moments are
//! listed in the same order as `params`.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use spectrain_core::nn::{Model, ModelConfig, NamedParam};
use spectrain_core::training::TrainState;
use spectrain_core::DenseMatrix;

pub const FORMAT: &str = "spectrain-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub config: Value,
    pub model_config: ModelConfig,
    pub params: Vec<ParamRecord>,
    pub train_state: TrainState,
}

impl Checkpoint {
    pub fn new(stage: Stage, config: Value, model: &Model, state: &TrainState) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            stage,
            config,
            model_config: model.config().clone(),
            params: model
                .params()
                .entries()
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    values: p.value.as_slice().to_vec(),
                })
                .collect(),
            train_state: state.clone(),
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn model(&self) -> anyhow::Result<Model> {
        let mut model = Model::new(self.model_config.clone(), 0)?;
        let params = self
            .params
            .iter()
            .map(|p| {
                Ok(NamedParam {
                    name: p.name.clone(),
                    value: DenseMatrix::from_vec(p.rows, p.cols, p.values.clone())
                        .with_context(|| format!("parameter {}", p.name))?,
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        ensure!(
            params.len() == model.params().len(),
            "checkpoint has {} parameters, model expects {}",
            params.len(),
            model.params().len()
        );
        let copied = model.load_matching(&params_store(params)?)?;
        ensure!(
            copied == model.params().len(),
            "checkpoint parameter names do not match the model"
        );
        ensure!(
            self.train_state.optimizer.m.len() == model.params().len(),
            "optimizer state does not match the parameters"
        );
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let header: Value = serde_json::from_str(text).context("checkpoint is not valid JSON")?;
        if header.get("format").and_then(Value::as_str) != Some(FORMAT) {
            bail!("not a {FORMAT} file");
        }
        match header.get("version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(VERSION) => {}
            other => bail!("unsupported checkpoint version {other:?}"),
        }
        Ok(serde_json::from_value(header)?)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("checkpoint {}", path.display()))
    }
}

fn params_store(params: Vec<NamedParam>) -> anyhow::Result<spectrain_core::nn::ParamStore> {
    let mut store = spectrain_core::nn::ParamStore::new();
    for p in params {
        ensure!(store.find(&p.name).is_none(), "duplicate parameter {}", p.name);
        store.add(p.name, p.value);
    }
    Ok(store)
}
