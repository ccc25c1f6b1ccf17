//! JSON checkpoints: model configuration plus every named parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FORMAT: &str = "sdebnn-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Widened to f64; exact for both supported scalars.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub model: ModelConfig,
    pub dynamics: DynamicsConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            scalar: T::NAME.into(),
            model: model.config.clone(),
            dynamics: model.dynamics.clone(),
            tensors: model
                .params
                .iter()
                .map(|(_, name, t)| NamedTensor { name: name.into(), shape: t.shape().to_vec(), data: t.to_f64_vec() })
                .collect(),
        }
    }

    /// Rebuild the model from the stored configuration and overwrite every
    /// parameter; names and shapes must match exactly.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::config(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        let mut model = Model::<T>::new(self.model.clone(), self.dynamics.clone())?;
        if self.tensors.len() != model.params.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, model configuration needs {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for nt in &self.tensors {
            let id = model
                .params
                .find(&nt.name)
                .ok_or_else(|| Error::shape(format!("checkpoint tensor {:?} is not a model parameter", nt.name)))?;
            let expected = model.params.get(id).shape().to_vec();
            if nt.shape != expected {
                return Err(Error::shape(format!(
                    "checkpoint tensor {:?} has shape {:?}, model expects {:?}",
                    nt.name, nt.shape, expected
                )));
            }
            model.params.set(id, Tensor::from_f64(nt.shape.clone(), &nt.data)?)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
