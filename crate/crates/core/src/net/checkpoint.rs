//! JSON checkpoints: spec echo, flat parameter arrays, optional optimizer
//! state and a content hash over everything else.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{BatchNorm, Linear, MlpModel, MlpSpec, OptimState};
use crate::error::{Error, Result};
use crate::io::{sha256_hex, CODE_VERSION};

pub const CHECKPOINT_FORMAT: &str = "posedepth-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub name: String,
    pub spec: MlpSpec,
    pub layers: Vec<LayerRecord>,
    pub norms: Vec<NormRecord>,
    pub optimizer: Option<OptimState>,
}

impl ModelRecord {
    pub fn new(name: &str, model: &MlpModel, optimizer: Option<&OptimState>) -> Self {
        Self {
            name: name.to_string(),
            spec: model.spec().clone(),
            layers: model
                .linears()
                .iter()
                .map(|l| LayerRecord {
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.as_ref().map(|b| b.to_vec()),
                })
                .collect(),
            norms: model
                .norms()
                .iter()
                .map(|n| NormRecord {
                    gamma: n.gamma.to_vec(),
                    beta: n.beta.to_vec(),
                    running_mean: n.running_mean.to_vec(),
                    running_var: n.running_var.to_vec(),
                })
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model, refusing records whose spec differs from `expected`.
    pub fn to_model(&self, expected: &MlpSpec) -> Result<MlpModel> {
        if &self.spec != expected {
            return Err(Error::Checkpoint(format!(
                "model '{}' spec {:?} does not match requested {:?}",
                self.name, self.spec, expected
            )));
        }
        // Shapes come from a freshly initialized model of the same spec.
        let mut model = MlpModel::init(expected.clone(), 0)?;
        if model.linears().len() != self.layers.len() || model.norms().len() != self.norms.len() {
            return Err(Error::Checkpoint(format!("model '{}' layer count mismatch", self.name)));
        }
        let bad = |what: &str| Error::Checkpoint(format!("model '{}': {what} has wrong size", self.name));
        for (dst, src) in model.linears_mut().iter_mut().zip(&self.layers) {
            let (r, c) = dst.weight.dim();
            *dst = Linear {
                weight: Array2::from_shape_vec((r, c), src.weight.clone()).map_err(|_| bad("weight"))?,
                bias: match (&dst.bias, &src.bias) {
                    (Some(b), Some(s)) if b.len() == s.len() => Some(Array1::from(s.clone())),
                    (None, None) => None,
                    _ => return Err(bad("bias")),
                },
            };
        }
        for (dst, src) in model.norms_mut().iter_mut().zip(&self.norms) {
            let d = dst.gamma.len();
            if [&src.gamma, &src.beta, &src.running_mean, &src.running_var]
                .iter()
                .any(|v| v.len() != d)
            {
                return Err(bad("norm"));
            }
            *dst = BatchNorm {
                gamma: Array1::from(src.gamma.clone()),
                beta: Array1::from(src.beta.clone()),
                running_mean: Array1::from(src.running_mean.clone()),
                running_var: Array1::from(src.running_var.clone()),
            };
        }
        if !model.is_finite() {
            return Err(Error::Checkpoint(format!("model '{}' has non-finite parameters", self.name)));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub tag: String,
    pub code_version: String,
    pub config_hash: String,
    pub models: Vec<ModelRecord>,
    /// Tag-specific payload (normalization statistics, refiner mode, ...).
    pub extra: serde_json::Value,
    pub content_hash: String,
}

impl Checkpoint {
    pub fn new(tag: &str, config_hash: &str, models: Vec<ModelRecord>, extra: serde_json::Value) -> Result<Self> {
        let mut ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            tag: tag.into(),
            code_version: CODE_VERSION.into(),
            config_hash: config_hash.into(),
            models,
            extra,
            content_hash: String::new(),
        };
        ckpt.content_hash = ckpt.compute_hash()?;
        Ok(ckpt)
    }

    fn compute_hash(&self) -> Result<String> {
        let unhashed = Checkpoint {
            content_hash: String::new(),
            ..self.clone()
        };
        Ok(sha256_hex(serde_json::to_string(&unhashed)?.as_bytes()))
    }

    /// Checks format, tag and content hash.
    pub fn verify(&self, expected_tag: &str) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {}", self.format)));
        }
        if self.tag != expected_tag {
            return Err(Error::Checkpoint(format!(
                "expected tag '{expected_tag}', found '{}'",
                self.tag
            )));
        }
        if self.compute_hash()? != self.content_hash {
            return Err(Error::Checkpoint("content hash mismatch".into()));
        }
        Ok(())
    }

    pub fn record(&self, name: &str) -> Result<&ModelRecord> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("no model named '{name}'")))
    }

    pub fn model(&self, name: &str, expected: &MlpSpec) -> Result<MlpModel> {
        self.record(name)?.to_model(expected)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_json_atomic(path, self)
    }

    pub fn load(path: &std::path::Path, expected_tag: &str) -> Result<Self> {
        let ckpt: Checkpoint = crate::io::read_json(path)?;
        ckpt.verify(expected_tag)?;
        Ok(ckpt)
    }
}
