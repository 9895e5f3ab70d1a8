//! JSON checkpoints holding parameters, buffers, optimizer moments and the
//! run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::nn::{Module, Param};
use crate::optim::AdamW;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub class_names: Vec<String>,
    pub config: TrainConfig,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn capture(
        model: &Detector,
        config: &TrainConfig,
        class_names: &[String],
        optimizer: Option<&AdamW>,
    ) -> Self {
        let mut params = Vec::new();
        model.visit(&mut |p: &Param| {
            params.push(NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
        });
        Self {
            format_version: CHECKPOINT_VERSION,
            step: optimizer.map_or(0, |o| o.step),
            class_names: class_names.to_vec(),
            config: config.clone(),
            params,
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the detector and overwrites every tensor with the stored one.
    pub fn restore(&self) -> Result<Detector> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: "<checkpoint>".into(),
                reason: format!("unsupported checkpoint version {}", self.format_version),
            });
        }
        let mut model = Detector::new(
            &self.config.model_config(),
            self.class_names.len(),
            self.config.seed,
        )?;
        let mut idx = 0;
        let mut err = None;
        model.visit_mut(&mut |p: &mut Param| {
            if err.is_some() {
                return;
            }
            match self.params.get(idx) {
                Some(t) if t.name == p.name && t.shape == p.value.shape() => {
                    match Tensor::new(t.shape.clone(), t.data.clone()) {
                        Ok(v) => p.value = v,
                        Err(e) => err = Some(e),
                    }
                }
                other => {
                    err = Some(Error::State(format!(
                        "checkpoint entry {:?} does not match parameter {} {:?}",
                        other.map(|t| (&t.name, &t.shape)),
                        p.name,
                        p.value.shape()
                    )))
                }
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != self.params.len() {
            return Err(Error::State(format!(
                "checkpoint has {} tensors, model has {idx}",
                self.params.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}
