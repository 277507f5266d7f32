//! Model files: one JSON document with the configuration, normalization
//! statistics and every weight tensor as base64 little-endian f64.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ofrnn_core::features::NormStats;
use ofrnn_core::neural::Parameters;
use ofrnn_core::pipeline::{Model, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MODEL_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl Tensor {
    pub fn encode(shape: &[usize], values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { shape: shape.to_vec(), data: STANDARD.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| Error::CorruptModel(format!("bad base64: {e}")))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != 8 * n {
            return Err(Error::CorruptModel(format!("tensor of shape {:?} holds {} bytes", self.shape, bytes.len())));
        }
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u64,
    frames: usize,
    config: PipelineConfig,
    norm_stats: NormStats,
    weights: BTreeMap<String, Tensor>,
}

pub fn to_json(model: &Model) -> String {
    let mut weights = BTreeMap::new();
    model.visit("", &mut |name, shape, data| {
        weights.insert(name.to_string(), Tensor::encode(shape, data));
    });
    let file = ModelFile {
        version: MODEL_VERSION,
        frames: model.frames,
        config: model.config.clone(),
        norm_stats: model.norm_stats.clone(),
        weights,
    };
    serde_json::to_string_pretty(&file).expect("model serializes")
}

pub fn from_json(text: &str) -> Result<Model> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::CorruptModel(format!("unreadable JSON: {e}")))?;
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(MODEL_VERSION) => {}
        Some(v) => return Err(Error::UnsupportedVersion(v)),
        None => return Err(Error::CorruptModel("missing version".into())),
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::CorruptModel(e.to_string()))?;
    let mut model = Model::skeleton(&file.config, file.frames).map_err(|e| Error::CorruptModel(e.to_string()))?;
    let mut weights = file.weights;
    let mut problem = None;
    model.visit_mut("", &mut |name, shape, data| {
        if problem.is_some() {
            return;
        }
        let Some(t) = weights.remove(name) else {
            problem = Some(format!("missing tensor {name}"));
            return;
        };
        if t.shape != shape {
            problem = Some(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape));
            return;
        }
        match t.decode() {
            Ok(values) => data.copy_from_slice(&values),
            Err(e) => problem = Some(format!("tensor {name}: {e}")),
        }
    });
    if let Some(p) = problem {
        return Err(Error::CorruptModel(p));
    }
    if let Some(extra) = weights.keys().next() {
        return Err(Error::CorruptModel(format!("unexpected tensor {extra}")));
    }
    model.norm_stats = file.norm_stats;
    model.validate().map_err(|e| Error::CorruptModel(e.to_string()))?;
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_json(model)).map_err(Error::io(path))
}

pub fn load_model(path: &Path) -> Result<Model> {
    from_json(&fs::read_to_string(path).map_err(Error::io(path))?)
}
