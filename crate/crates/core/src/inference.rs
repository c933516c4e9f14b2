// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-diffusion sampling, predictive moments and the resampled
//! prediction-error variance.

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ScaledSeries;
use crate::error::{Error, Result};
use crate::networks::{DenoiserParams, ModelConfig, ModelParams, Scratch, StepTable};
use crate::schedule::NoiseSchedule;
use crate::stream_rng;

const PREDICT_STREAM: u64 = 2;
const RESAMPLE_STREAM: u64 = 3;
/// Target rows per denoiser batch during sampling.
const BATCH_ROWS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictivePoint {
    pub index: usize,
    pub mu: f64,
    pub sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<f64>>,
}

/// Sample mean and standard deviation with the `1/(M-1)` divisor.
pub fn summarize(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mu = samples.iter().sum::<f64>() / n;
    let ss = samples.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>();
    Ok((mu, (ss / (n - 1.0)).sqrt()))
}

/// Runs the reverse chain for every row of `cond_rows` (already projected
/// with [`DenoiserParams::condition_rows`]). `rngs[r / per_point]` drives
/// row `r`; draws happen point by point, so results do not depend on how
/// points are grouped into batches.
fn run_chains(
    den: &DenoiserParams,
    table: &StepTable,
    sched: &NoiseSchedule,
    cond_rows: &Array2<f64>,
    per_point: usize,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<f64>> {
    let rows = cond_rows.nrows();
    let mut x = vec![0.0; rows];
    for (chunk, rng) in x.chunks_mut(per_point).zip(rngs.iter_mut()) {
        for v in chunk {
            *v = rng.sample(StandardNormal);
        }
    }
    let mut eps = vec![0.0; rows];
    let mut scratch = Scratch::new(rows, den.hidden());
    for m in (1..=sched.steps()).rev() {
        den.predict_into(&x, cond_rows.view(), table.row(m), &mut scratch, &mut eps);
        for ((chunk, e), rng) in x.chunks_mut(per_point).zip(eps.chunks(per_point)).zip(rngs.iter_mut()) {
            for (v, &e) in chunk.iter_mut().zip(e) {
                let z: f64 = if m > 1 { rng.sample(StandardNormal) } else { 0.0 };
                *v = sched.reverse_step_unchecked(*v, e, m, z);
            }
        }
        if let Some(r) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "sample {r} became non-finite at diffusion step {m}"
            )));
        }
    }
    Ok(x)
}

/// One clean-value draw from `x^T ~ N(0, 1)` conditioned on `cond`.
pub fn sample_trajectory(
    cond: ArrayView1<'_, f64>,
    den: &DenoiserParams,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if cond.len() != den.cond_dim() {
        return Err(Error::Dimension(format!(
            "conditioning vector has {} entries, denoiser expects {}",
            cond.len(),
            den.cond_dim()
        )));
    }
    let rows = den.condition_rows(cond.insert_axis(Axis(0)));
    let table = den.step_table(sched.steps());
    let out = run_chains(den, &table, sched, &rows, 1, std::slice::from_mut(rng))?;
    Ok(out[0])
}

/// Draws `m` samples for every target and reduces them to predictive moments
/// in scaled units. Targets must satisfy `C <= t < len`. Each target uses
/// its own random stream derived from `(seed, iteration, t)`.
#[allow(clippy::too_many_arguments)]
pub fn predict_points(
    params: &ModelParams,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    series: &ScaledSeries,
    targets: &[usize],
    m: usize,
    seed: u64,
    iteration: usize,
    keep_samples: bool,
) -> Result<Vec<PredictivePoint>> {
    if m < 2 {
        return Err(Error::invalid(format!("need at least 2 samples per point, got {m}")));
    }
    if let Some(&t) = targets.iter().find(|&&t| t < cfg.context_len || t >= series.len()) {
        return Err(Error::OutOfRange {
            index: t,
            range: format!("[{}, {})", cfg.context_len, series.len()),
        });
    }
    let table = params.denoiser.step_table(sched.steps());
    let points_per_batch = (BATCH_ROWS / m).max(1);
    let batches: Vec<Result<Vec<PredictivePoint>>> = targets
        .par_chunks(points_per_batch)
        .map(|chunk| {
            let cond = params.condition(cfg, series, chunk);
            let projected = params.denoiser.condition_rows(cond.view());
            let rows = Array2::from_shape_fn((chunk.len() * m, projected.ncols()), |(r, c)| projected[[r / m, c]]);
            let mut rngs: Vec<ChaCha8Rng> = chunk
                .iter()
                .map(|&t| stream_rng(seed, PREDICT_STREAM, iteration as u64, t as u64))
                .collect();
            let x = run_chains(&params.denoiser, &table, sched, &rows, m, &mut rngs)?;
            chunk
                .iter()
                .zip(x.chunks(m))
                .map(|(&t, s)| {
                    let (mu, sigma) = summarize(s)?;
                    Ok(PredictivePoint {
                        index: t,
                        mu,
                        sigma,
                        samples: keep_samples.then(|| s.to_vec()),
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(targets.len());
    for b in batches {
        out.extend(b?);
    }
    Ok(out)
}

/// Single-point convenience wrapper around [`predict_points`].
#[allow(clippy::too_many_arguments)]
pub fn predict_point(
    t: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    series: &ScaledSeries,
    m: usize,
    seed: u64,
    iteration: usize,
) -> Result<PredictivePoint> {
    predict_points(params, cfg, sched, series, &[t], m, seed, iteration, true).map(|mut v| v.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorVariance {
    pub sigma2: f64,
    pub resample_count: usize,
    pub subset_fraction: f64,
}

/// Average over random subsets (drawn without replacement) of each subset's
/// unbiased variance.
pub fn estimate_error_variance(
    residuals: &[f64],
    resample_count: usize,
    subset_fraction: f64,
    rng: &mut impl Rng,
) -> Result<ErrorVariance> {
    if residuals.len() < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 residuals, got {}",
            residuals.len()
        )));
    }
    if !(subset_fraction > 0.0 && subset_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "subset fraction must lie in (0, 1], got {subset_fraction}"
        )));
    }
    if resample_count == 0 {
        return Err(Error::invalid("resample count must be positive"));
    }
    let size = (subset_fraction * residuals.len() as f64).round() as usize;
    if size < 2 {
        return Err(Error::invalid("resampled subsets would hold fewer than 2 residuals"));
    }
    let mut total = 0.0;
    for _ in 0..resample_count {
        // shifted by the first residual so equal residuals give exactly 0
        let picked: Vec<f64> = sample_indices(rng, residuals.len(), size)
            .into_iter()
            .map(|i| residuals[i] - residuals[0])
            .collect();
        let mean = picked.iter().sum::<f64>() / size as f64;
        total += picked.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (size - 1) as f64;
    }
    Ok(ErrorVariance {
        sigma2: total / resample_count as f64,
        resample_count,
        subset_fraction,
    })
}

/// The stream used for the error-variance resampling of a pipeline round.
pub fn resample_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    stream_rng(seed, RESAMPLE_STREAM, iteration as u64, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

/// `N(mu_t, sigma_t^2 + sigma^2)`.
pub fn predictive_distribution(p: &PredictivePoint, e: &ErrorVariance) -> Result<Gaussian> {
    let var = p.sigma * p.sigma + e.sigma2;
    if !(var > 0.0) {
        return Err(Error::Degenerate(format!(
            "point {} has zero sampling spread and zero error variance",
            p.index
        )));
    }
    Ok(Gaussian { mean: p.mu, var })
}
