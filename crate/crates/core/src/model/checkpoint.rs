use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Serialized model: configuration, every tensor and a content digest.
/// Values are stored as `f64` regardless of the training precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub scalar: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub digest: String,
    pub tensors: Vec<TensorRecord>,
    /// Caller-defined extras (stage history, vocabulary, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl<T: Scalar> Model<T> {
    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            scalar: T::NAME.to_string(),
            seed: self.seed,
            config: self.config.clone(),
            digest: self.digest(),
            tensors: self
                .params
                .iter()
                .map(|(_, name, t)| TensorRecord {
                    name: name.to_string(),
                    shape: [t.rows(), t.cols()],
                    data: t.as_slice().iter().map(|x| x.as_f64()).collect(),
                })
                .collect(),
            metadata,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: ck.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        ck.config.validate()?;
        let mut params = ParamStore::new();
        for r in &ck.tensors {
            if r.data.len() != r.shape[0] * r.shape[1] {
                return Err(Error::Shape(format!("tensor {} has {} values for shape {:?}", r.name, r.data.len(), r.shape)));
            }
            if params.contains(&r.name) {
                return Err(Error::Invalid(format!("duplicate tensor {}", r.name)));
            }
            let data = r.data.iter().map(|&x| T::c(x)).collect();
            params.insert(r.name.clone(), Matrix::from_vec(r.shape[0], r.shape[1], data));
        }
        let model = Self {
            config: ck.config.clone(),
            params,
            seed: ck.seed,
        };
        let reference = Self::new(ck.config.clone(), ck.seed)?;
        for (_, name, t) in reference.params.iter() {
            match model.params.by_name(name) {
                Some(have) if have.shape() == t.shape() => {}
                Some(have) => {
                    return Err(Error::Shape(format!("tensor {name} is {:?}, expected {:?}", have.shape(), t.shape())));
                }
                None => return Err(Error::Invalid(format!("checkpoint lacks tensor {name}"))),
            }
        }
        if T::NAME == ck.scalar && model.digest() != ck.digest {
            return Err(Error::Invalid("checkpoint digest mismatch".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: serde_json::Value) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint(metadata))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok((Self::from_checkpoint(&ck)?, ck.metadata))
    }
}
