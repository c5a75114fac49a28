//! JSON checkpoints holding the config, seed and every parameter.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::PeclModel;
use crate::params::ParamGroup;
use crate::tensor::{Scalar, Tensor};

pub const FORMAT: &str = "pecl-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
    /// Little-endian values, base64 encoded.
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &PeclModel<T>) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, p)| {
                let mut bytes = Vec::with_capacity(p.tensor.len() * T::size());
                for &v in p.tensor.data() {
                    v.write_le(&mut bytes);
                }
                ParamRecord {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    group: p.group,
                    trainable: p.trainable,
                    data: STANDARD.encode(bytes),
                }
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            dtype: T::DTYPE.into(),
            seed: model.seed,
            config: model.config().clone(),
            params,
        }
    }

    /// Rebuilds the model from config and seed, then overwrites every value.
    pub fn to_model<T: Scalar>(&self) -> Result<PeclModel<T>> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
                self.format, self.version
            )));
        }
        let mut model = PeclModel::<T>::build(&self.config, self.seed)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for rec in &self.params {
            let id = model
                .params
                .id(&rec.name)
                .ok_or_else(|| Error::Validation(format!("checkpoint parameter {} not in model", rec.name)))?;
            let p = model.params.get(id);
            if p.tensor.shape() != rec.shape.as_slice() || p.trainable != rec.trainable || p.group != rec.group {
                return Err(Error::Shape(format!(
                    "parameter {}: checkpoint {:?} ({}, trainable {}) vs model {:?} ({}, trainable {})",
                    rec.name,
                    rec.shape,
                    rec.group.name(),
                    rec.trainable,
                    p.tensor.shape(),
                    p.group.name(),
                    p.trainable
                )));
            }
            let bytes = STANDARD
                .decode(&rec.data)
                .map_err(|e| Error::Validation(format!("parameter {}: bad base64: {e}", rec.name)))?;
            let expected_bytes = p.tensor.len() * dtype_size(&self.dtype, &rec.name)?;
            if bytes.len() != expected_bytes {
                return Err(Error::Validation(format!(
                    "parameter {}: {} bytes for shape {:?} in {}",
                    rec.name,
                    bytes.len(),
                    rec.shape,
                    self.dtype
                )));
            }
            *model.params.tensor_mut(id) = if self.dtype == T::DTYPE {
                Tensor::new(rec.shape.clone(), bytes.chunks_exact(T::size()).map(T::read_le).collect())?
            } else if self.dtype == "f32" {
                let v: Vec<f32> = bytes.chunks_exact(4).map(f32::read_le).collect();
                Tensor::new(rec.shape.clone(), v)?.cast()
            } else {
                let v: Vec<f64> = bytes.chunks_exact(8).map(f64::read_le).collect();
                Tensor::new(rec.shape.clone(), v)?.cast()
            };
        }
        Ok(model)
    }

    /// Fails unless the stored config equals `expected`, listing both.
    /// Optimizer settings are not compared; they do not shape the model.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        let mut probe = expected.clone();
        probe.optim = self.config.optim.clone();
        if self.config == probe {
            return Ok(());
        }
        Err(Error::Shape(format!(
            "checkpoint config does not match the requested config\ncheckpoint: {}\nrequested:  {}",
            serde_json::to_string(&self.config)?,
            serde_json::to_string(expected)?
        )))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

fn dtype_size(dtype: &str, name: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Validation(format!("parameter {name}: unknown dtype {other}"))),
    }
}
