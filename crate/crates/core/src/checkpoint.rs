// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON checkpoints of trained models.
//!
//! Floats are written with shortest round-trip formatting, so a saved and
//! reloaded model is bit-identical. `model_hash` covers the tensors and
//! `config_hash` the settings that must match when the model is reused.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Normalizer;
use crate::error::{Error, Result};
use crate::networks::{ModelConfig, ModelParams};
use crate::pipeline::PipelineConfig;

pub const FORMAT: &str = "diffclean-checkpoint";
pub const VERSION: u32 = 1;

/// Settings a model is only valid under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBinding {
    pub model: ModelConfig,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub quartile_scaling: bool,
    pub train_fraction: f64,
}

impl ModelBinding {
    pub fn new(model: &ModelConfig, pc: &PipelineConfig) -> Self {
        Self {
            model: model.clone(),
            diffusion_steps: pc.diffusion_steps,
            beta_min: pc.beta_min,
            beta_max: pc.beta_max,
            quartile_scaling: pc.quartile_scaling,
            train_fraction: pc.train_fraction,
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub model_hash: String,
    pub seed: u64,
    /// Pipeline round whose training produced the weights.
    pub iteration: usize,
    pub binding: ModelBinding,
    pub normalizer: Normalizer,
    pub tensors: Vec<Tensor>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the parameter names, shapes and exact bit patterns.
pub fn model_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for t in params.tensors() {
        h.update(t.name.as_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn new(
        params: &ModelParams,
        binding: ModelBinding,
        normalizer: Normalizer,
        seed: u64,
        iteration: usize,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config_hash: binding.hash(),
            model_hash: model_hash(params),
            seed,
            iteration,
            binding,
            normalizer,
            tensors: params
                .tensors()
                .into_iter()
                .map(|t| Tensor {
                    name: t.name,
                    shape: t.shape,
                    data: t.data.to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the parameters, checking names, shapes and the hash.
    pub fn params(&self) -> Result<ModelParams> {
        self.binding.model.validate()?;
        let mut params = ModelParams::zeros(&self.binding.model);
        let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, name, shape
                )));
            }
        }
        for (dst, t) in params.slices_mut().into_iter().zip(&self.tensors) {
            dst.copy_from_slice(&t.data);
        }
        if model_hash(&params) != self.model_hash {
            return Err(Error::Checkpoint("model_hash does not match the stored tensors".into()));
        }
        Ok(params)
    }

    /// Refuses to pair the model with different settings.
    pub fn check_binding(&self, binding: &ModelBinding) -> Result<()> {
        let want = binding.hash();
        if self.config_hash != want || self.binding.hash() != self.config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained under config {} but the current config hashes to {}",
                self.config_hash, want
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }
}
