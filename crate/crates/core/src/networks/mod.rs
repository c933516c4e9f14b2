// SPDX-License-Identifier: MIT OR Apache-2.0

//! The conditional embedding GRU and the residual denoising network.
//!
//! Both networks run on row batches (`B x features`); a single evaluation is
//! a batch of one. Forward passes used for training keep caches so the
//! training module can run exact reverse-mode differentiation.

mod denoiser;
mod gru;

pub use denoiser::{
    denoiser_forward, step_embedding, DenoiserCache, DenoiserParams, ResidualBlock, Scratch, StepTable,
};
pub use gru::{gru_forward, GruCache, GruLayer, GruParams, HiddenState};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ScaledSeries, TIME_FEATURES};
use crate::error::{Error, Result};

/// Architecture of one model instance.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub context_len: usize,
    /// Width of the denoiser.
    pub hidden: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub blocks: usize,
    pub step_embed_dim: usize,
    /// When false the denoiser is conditioned on the raw covariate vector
    /// of the target step instead of the recurrent hidden state.
    pub conditional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_len: 80,
            hidden: 64,
            gru_hidden: 30,
            gru_layers: 4,
            blocks: 8,
            step_embed_dim: 32,
            conditional: true,
        }
    }
}

impl ModelConfig {
    /// `C + f`.
    pub fn covariate_dim(&self) -> usize {
        self.context_len + TIME_FEATURES
    }

    /// Width of the vector the denoiser is conditioned on.
    pub fn cond_dim(&self) -> usize {
        if self.conditional {
            self.gru_hidden * self.gru_layers
        } else {
            self.covariate_dim()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(Error::Config("context_len, hidden and blocks must be positive".into()));
        }
        if self.conditional && (self.gru_hidden == 0 || self.gru_layers == 0) {
            return Err(Error::Config("conditional model needs a non-empty GRU".into()));
        }
        if self.step_embed_dim < 2 || !self.step_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("step_embed_dim must be even and >= 2".into()));
        }
        Ok(())
    }
}

/// Smooth saturating nonlinearity used inside the denoiser: `x / sqrt(1 + x^2)`.
#[inline]
pub(crate) fn soft_act(x: f64) -> f64 {
    x / (1.0 + x * x).sqrt()
}

/// Derivative of [`soft_act`]: `(1 + x^2)^(-3/2)`.
#[inline]
pub(crate) fn soft_act_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + x * x).sqrt();
    s * s * s
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// All learnable weights: the conditional embedding network and the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub gru: GruParams,
    pub denoiser: DenoiserParams,
}

/// Name, shape and flat storage of one parameter array.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let gru = if cfg.conditional {
            GruParams::zeros(cfg.gru_layers, cfg.gru_hidden, cfg.covariate_dim())
        } else {
            GruParams { layers: Vec::new() }
        };
        Self {
            gru,
            denoiser: DenoiserParams::zeros(cfg.hidden, cfg.cond_dim(), cfg.step_embed_dim, cfg.blocks),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, d| d.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Parameter arrays in a fixed order; checkpoints and the optimizer rely
    /// on this order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.gru.layers.iter().enumerate() {
            l.push_tensors(&format!("gru.{i}"), &mut out);
        }
        self.denoiser.push_tensors("denoiser", &mut out);
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (i, l) in self.gru.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("gru.{i}"), &mut f);
        }
        self.denoiser.visit_mut("denoiser", &mut f);
    }

    /// Flat mutable views in [`tensors`](Self::tensors) order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.gru.layers.iter_mut() {
            l.push_slices_mut(&mut out);
        }
        self.denoiser.push_slices_mut(&mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let src: Vec<Vec<f64>> = other.tensors().iter().map(|t| t.data.to_vec()).collect();
        for (dst, s) in self.slices_mut().into_iter().zip(src.iter()) {
            dst.iter_mut().zip(s).for_each(|(d, v)| *d += scale * v);
        }
    }

    /// First tensor holding a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name)
    }
}

/// Recurrent-network inputs for a batch of targets: one `B x (C+f)` matrix
/// per context position, oldest first.
pub fn position_inputs(series: &ScaledSeries, targets: &[usize], context: usize) -> Vec<Array2<f64>> {
    let dim = context + TIME_FEATURES;
    (0..context)
        .map(|step| {
            let mut x = Array2::zeros((targets.len(), dim));
            for (mut row, &t) in x.rows_mut().into_iter().zip(targets) {
                let pos = t + 1 + step - context;
                series.write_position_covariate(t, pos, context, row.as_slice_mut().unwrap());
            }
            x
        })
        .collect()
}

/// Cache of [`ModelParams::condition_cached`].
pub struct ConditionCache {
    gru: Option<GruCache>,
}

impl ModelParams {
    /// Conditioning vectors (`B x cond_dim`) for targets `t >= C`.
    pub fn condition(&self, cfg: &ModelConfig, series: &ScaledSeries, targets: &[usize]) -> Array2<f64> {
        let inputs = position_inputs(series, targets, cfg.context_len);
        if cfg.conditional {
            self.gru.unroll(&inputs)
        } else {
            inputs.into_iter().last().expect("context_len > 0")
        }
    }

    pub fn condition_cached(
        &self,
        cfg: &ModelConfig,
        series: &ScaledSeries,
        targets: &[usize],
    ) -> (Array2<f64>, ConditionCache) {
        let inputs = position_inputs(series, targets, cfg.context_len);
        if cfg.conditional {
            let (out, cache) = self.gru.unroll_cached(&inputs);
            (out, ConditionCache { gru: Some(cache) })
        } else {
            (
                inputs.into_iter().last().expect("context_len > 0"),
                ConditionCache { gru: None },
            )
        }
    }

    /// Pushes the conditioning gradient back into the recurrent weights.
    pub fn condition_backward(&self, cache: &ConditionCache, dcond: &Array2<f64>, grads: &mut ModelParams) {
        if let Some(c) = &cache.gru {
            self.gru.backward(c, dcond, &mut grads.gru);
        }
    }
}

pub(crate) fn tensor_ref<'a>(name: String, a: &'a Array2<f64>) -> TensorRef<'a> {
    TensorRef {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    }
}

pub(crate) fn tensor_ref1<'a>(name: String, a: &'a Array1<f64>) -> TensorRef<'a> {
    TensorRef {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    }
}

/// Random initialization: weights i.i.d. `N(0, 1) / sqrt(fan_in)`, biases 0.
pub fn init_params(seed: u64, cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut p = ModelParams::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let denoiser_in = 1 + cfg.cond_dim();
    let h = cfg.hidden;
    let e = cfg.step_embed_dim;
    p.for_each_mut(|name, data| {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        if leaf.starts_with('b') {
            return;
        }
        let fan_in = match leaf {
            "w_x" | "w_cond" => denoiser_in,
            "w_step" => e,
            "w_out" | "w_head" | "w1" | "w2" => h,
            // gates are hidden x (hidden + input)
            _ => data.len() / cfg.gru_hidden,
        };
        let scale = 1.0 / (fan_in as f64).sqrt();
        for v in data.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = n * scale;
        }
    });
    Ok(p)
}
