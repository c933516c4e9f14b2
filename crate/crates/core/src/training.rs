// SPDX-License-Identifier: MIT OR Apache-2.0

//! Noise-prediction training with the robust loss, mask-aware window
//! weights, Adam and a cosine learning-rate schedule.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::ScaledSeries;
use crate::error::{Error, Result};
use crate::networks::{ModelConfig, ModelParams};
use crate::schedule::NoiseSchedule;
use crate::stream_rng;

const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs of the first round.
    pub epochs: usize,
    /// Epochs of each warm-started round after imputation.
    pub warm_epochs: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub lr_decay_per_iteration: f64,
    pub batch_size: usize,
    pub huber_delta: f64,
    /// Loss weight of windows that contain an imputed value.
    pub mask_weight: f64,
    /// Squared error instead of the robust loss.
    pub squared_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            warm_epochs: 10,
            lr0: 1e-3,
            lr_min: 1e-9,
            lr_decay_per_iteration: 0.3,
            batch_size: 64,
            huber_delta: 1.0,
            mask_weight: 0.5,
            squared_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.lr0,
            self.lr_min,
            self.lr_decay_per_iteration,
            self.huber_delta,
            self.mask_weight,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(
                "lr0, lr_min, lr_decay_per_iteration, huber_delta and mask_weight must be positive".into(),
            ));
        }
        if self.lr_min >= self.lr0 {
            return Err(Error::Config(format!(
                "lr_min {} must be below lr0 {}",
                self.lr_min, self.lr0
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Initial learning rate of pipeline iteration `iteration` (0-based).
    pub fn iteration_lr0(&self, iteration: usize) -> f64 {
        self.lr0 * self.lr_decay_per_iteration.powi(iteration as i32)
    }

    pub fn iteration_epochs(&self, iteration: usize) -> usize {
        if iteration == 0 {
            self.epochs
        } else {
            self.warm_epochs
        }
    }
}

/// `r^2` for `|r| <= delta`, `|r|` beyond.
pub fn huber(residual: f64, delta: f64) -> f64 {
    if residual.abs() <= delta {
        residual * residual
    } else {
        residual.abs()
    }
}

/// Derivative of [`huber`]; at `|r| = delta` the quadratic side is used.
pub fn huber_grad(residual: f64, delta: f64) -> f64 {
    if residual.abs() <= delta {
        2.0 * residual
    } else {
        residual.signum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Loss {
    Huber { delta: f64 },
    Squared,
}

impl Loss {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        if cfg.squared_loss {
            Loss::Squared
        } else {
            Loss::Huber { delta: cfg.huber_delta }
        }
    }

    pub fn value(self, r: f64) -> f64 {
        match self {
            Loss::Huber { delta } => huber(r, delta),
            Loss::Squared => r * r,
        }
    }

    pub fn grad(self, r: f64) -> f64 {
        match self {
            Loss::Huber { delta } => huber_grad(r, delta),
            Loss::Squared => 2.0 * r,
        }
    }
}

/// `lr_min + (lr0 - lr_min)(1 + cos(pi e / (E - 1))) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::OutOfRange {
            index: epoch,
            range: format!("[0, {total_epochs})"),
        });
    }
    if total_epochs == 1 {
        return Ok(lr0);
    }
    let phase = std::f64::consts::PI * epoch as f64 / (total_epochs - 1) as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}

/// One training example: a target index with its sampled step and noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub target: usize,
    pub step: usize,
    pub eps: f64,
    pub weight: f64,
}

/// Loss weight of the window ending at `t`.
pub fn window_weight(series: &ScaledSeries, t: usize, context: usize, mask_weight: f64) -> f64 {
    if series.mask[t - context..=t].iter().any(|&m| m) {
        mask_weight
    } else {
        1.0
    }
}

fn check_samples(cfg: &ModelConfig, sched: &NoiseSchedule, series: &ScaledSeries, samples: &[Sample]) -> Result<()> {
    for s in samples {
        if s.target < cfg.context_len || s.target >= series.len() {
            return Err(Error::OutOfRange {
                index: s.target,
                range: format!("[{}, {})", cfg.context_len, series.len()),
            });
        }
        if s.step == 0 || s.step > sched.steps() {
            return Err(Error::OutOfRange {
                index: s.step,
                range: format!("[1, {}]", sched.steps()),
            });
        }
    }
    Ok(())
}

/// Weighted mean loss of a batch and its exact gradient.
pub fn batch_loss_grad(
    params: &ModelParams,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    series: &ScaledSeries,
    samples: &[Sample],
    loss: Loss,
) -> Result<(f64, ModelParams)> {
    check_samples(cfg, sched, series, samples)?;
    let targets: Vec<usize> = samples.iter().map(|s| s.target).collect();
    let (cond, ccache) = params.condition_cached(cfg, series, &targets);
    let xm = Array1::from_iter(
        samples
            .iter()
            .map(|s| sched.alpha_bar(s.step) * series.values[s.target] + sched.beta_bar(s.step) * s.eps),
    );
    let steps: Vec<usize> = samples.iter().map(|s| s.step).collect();
    let (eps_hat, dcache) = params.denoiser.forward_cached(&xm, cond.view(), &steps);
    let n = samples.len() as f64;
    let mut total = 0.0;
    let mut dout = Array1::zeros(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let r = s.eps - eps_hat[i];
        total += s.weight * loss.value(r);
        dout[i] = -s.weight * loss.grad(r) / n;
    }
    let mut grads = params.zeros_like();
    let dcond = params.denoiser.backward(&dcache, &dout, &mut grads.denoiser);
    params.condition_backward(&ccache, &dcond, &mut grads);
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite gradient in {name}")));
    }
    Ok((total / n, grads))
}

/// Loss of a single window.
pub fn window_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    series: &ScaledSeries,
    sample: Sample,
    loss: Loss,
) -> Result<f64> {
    check_samples(cfg, sched, series, &[sample])?;
    let cond = params.condition(cfg, series, &[sample.target]);
    let xm = sched.forward_diffuse(series.values[sample.target], sample.step, sample.eps)?;
    let (eps_hat, _) = params
        .denoiser
        .forward_cached(&Array1::from(vec![xm]), cond.view(), &[sample.step]);
    Ok(sample.weight * loss.value(sample.eps - eps_hat[0]))
}

/// First and second moment buffers shaped like the parameters.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let g = grads.tensors();
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(&g)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * gi;
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Trains on the windows ending at `C..train_len`, warm-starting from
/// `params`. Round `iteration` uses `lr0 * decay^iteration` and the
/// epoch count of [`TrainConfig::iteration_epochs`].
#[allow(clippy::too_many_arguments)]
pub fn train(
    mut params: ModelParams,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    sched: &NoiseSchedule,
    series: &ScaledSeries,
    train_len: usize,
    seed: u64,
    iteration: usize,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    tc.validate()?;
    let c = cfg.context_len;
    if train_len > series.len() || train_len < c + 1 {
        return Err(Error::invalid(format!(
            "training split of {train_len} points cannot hold a window of C+1 = {}",
            c + 1
        )));
    }
    let epochs = tc.iteration_epochs(iteration);
    let lr0 = tc.iteration_lr0(iteration);
    let loss = Loss::from_config(tc);
    let mut rng = stream_rng(seed, TRAIN_STREAM, iteration as u64, 0);
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (c..train_len).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = cosine_lr(epoch, epochs, lr0, tc.lr_min)?;
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&t| Sample {
                    target: t,
                    step: rng.random_range(1..=sched.steps()),
                    eps: rng.sample(StandardNormal),
                    weight: window_weight(series, t, c, tc.mask_weight),
                })
                .collect();
            let (l, grads) = batch_loss_grad(&params, cfg, sched, series, &batch, loss)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("loss diverged in epoch {epoch}")));
            }
            sum += l * batch.len() as f64;
            adam.step(&mut params, &grads, lr);
        }
        if let Some(name) = params.first_non_finite() {
            return Err(Error::Numeric(format!(
                "parameters of {name} diverged in epoch {epoch}"
            )));
        }
        history.push(EpochRecord {
            epoch,
            lr,
            mean_loss: sum / order.len() as f64,
        });
    }
    Ok((params, history))
}
