//! Run configuration: a JSON object whose keys are dotted paths such as
//! `model.base_channels` or `train.lr`. Nested objects are accepted too and
//! flattened to the same keys.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use dsdcn_core::data::DatasetKind;
use dsdcn_core::loss::LossWeights;
use dsdcn_core::model::DsdcnConfig;
use dsdcn_core::train::{DataConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub cube: Option<PathBuf>,
    pub dataset_kind: DatasetKind,
    pub patch_size: usize,
    pub patch_stride: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: DsdcnConfig,
    pub train: TrainSection,
    pub loss: LossWeights,
    pub data: DataSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = DataConfig::default();
        Self {
            model: DsdcnConfig::default(),
            train: TrainSection {
                batch_size: t.batch_size,
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                patience: t.patience,
                max_epochs: t.max_epochs,
                seed: t.seed,
            },
            loss: t.loss,
            data: DataSection {
                cube: None,
                dataset_kind: d.dataset_kind,
                patch_size: d.patch_size,
                patch_stride: d.patch_stride,
            },
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            patience: t.patience,
            max_epochs: t.max_epochs,
            seed: t.seed,
            loss: self.loss,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            dataset_kind: self.data.dataset_kind,
            patch_size: self.data.patch_size,
            patch_stride: self.data.patch_stride,
        }
    }

    /// Defaults, then `file` keys, then `overrides` (`key=value`).
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut flat = flatten(&serde_json::to_value(Self::default())?);
        if let Some(text) = file {
            let v: Value = serde_json::from_str(text).context("config file is not valid JSON")?;
            if !v.is_object() {
                bail!("config file must hold a JSON object");
            }
            for (k, v) in flatten(&v) {
                set_key(&mut flat, &k, v)?;
            }
        }
        for o in overrides {
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override {o:?} must look like key=value"))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_key(&mut flat, k.trim(), v)?;
        }
        let cfg: Self = serde_json::from_value(unflatten(&flat)).context("invalid config value")?;
        cfg.model.validate()?;
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    /// Effective configuration as a flat, sorted JSON object.
    pub fn to_flat_json(&self) -> String {
        let flat = flatten(&serde_json::to_value(self).expect("config serializes"));
        serde_json::to_string_pretty(&flat).expect("config serializes")
    }
}

fn set_key(flat: &mut BTreeMap<String, Value>, key: &str, value: Value) -> Result<()> {
    match flat.get_mut(key) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => bail!("unknown config key {key:?}"),
    }
}

fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = k.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("sections are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}
