// SPDX-License-Identifier: MIT OR Apache-2.0

//! The iterative cleaning loop: train, predict, estimate the error
//! variance, score, impute, and repeat until the variance settles.

use serde::{Deserialize, Serialize};

use crate::dataset::{impute, Normalizer, ScaledSeries, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::inference::{estimate_error_variance, predict_points, resample_rng, ErrorVariance, PredictivePoint};
use crate::networks::{init_params, ModelConfig, ModelParams};
use crate::quality::{classify, mse_lmae, outlier_probability, precision_recall_f1, qes, Detection, ErrorMetrics};
use crate::schedule::NoiseSchedule;
use crate::training::{train, EpochRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Chronological share of the series used for training; the rest is
    /// the forecast horizon.
    pub train_fraction: f64,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Reverse-diffusion samples per point.
    pub samples: usize,
    /// Relative tolerance on the change of the error variance.
    pub tau: f64,
    pub max_iterations: usize,
    /// QES scaling factor.
    pub k: f64,
    pub threshold: f64,
    pub resample_count: usize,
    pub subset_fraction: f64,
    /// Median/interquartile scaling; z-score when false.
    pub quartile_scaling: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            diffusion_steps: 140,
            beta_min: 1e-4,
            beta_max: 0.1,
            samples: 100,
            tau: 0.02,
            max_iterations: 10,
            k: 0.1,
            threshold: 0.5,
            resample_count: 50,
            subset_fraction: 0.5,
            quartile_scaling: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must lie in (0, 1]");
        }
        if self.samples < 2 {
            return bad("samples must be at least 2");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if !(self.k > 0.0 && self.k < 1.0) {
            return bad("k must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1)");
        }
        if self.resample_count == 0 || !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad("resample_count must be positive and subset_fraction in (0, 1]");
        }
        self.schedule().map(|_| ()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_min, self.beta_max)
    }
}

/// Everything that shapes a cleaning run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleaningConfig {
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.train.validate()?;
        self.model.validate()
    }
}

/// `|curr - prev| <= tau * max(prev, 1e-12)`.
pub fn check_convergence(sigma2_prev: f64, sigma2_curr: f64, tau: f64) -> bool {
    (sigma2_curr - sigma2_prev).abs() <= tau * sigma2_prev.max(1e-12)
}

/// Scores of one model over every predictable point `C..len`.
#[derive(Clone, Debug)]
pub struct Assessment {
    pub predictions: Vec<PredictivePoint>,
    pub error: ErrorVariance,
    /// Outlier probability per prediction.
    pub p_o: Vec<f64>,
    pub flagged: Vec<bool>,
    /// Quality score over the training span.
    pub qes: f64,
}

impl Assessment {
    /// Flagged probabilities inside the training span.
    pub fn train_flagged_probs(&self, train_len: usize) -> Vec<f64> {
        self.predictions
            .iter()
            .zip(&self.p_o)
            .zip(&self.flagged)
            .filter(|((p, _), &f)| f && p.index < train_len)
            .map(|((_, &p), _)| p)
            .collect()
    }

    pub fn qes_with_k(&self, train_len: usize, context: usize, k: f64) -> Result<f64> {
        qes(&self.train_flagged_probs(train_len), train_len - context, k)
    }
}

/// Predicts every point from `C` on, estimates the error variance from the
/// training residuals and scores each point. Pure given `(seed, iteration)`.
pub fn assess(
    params: &ModelParams,
    model: &ModelConfig,
    pc: &PipelineConfig,
    sched: &NoiseSchedule,
    series: &ScaledSeries,
    train_len: usize,
    iteration: usize,
) -> Result<Assessment> {
    let c = model.context_len;
    if series.len() <= c {
        return Err(Error::invalid(format!(
            "series of {} points leaves nothing to predict after a context of {c}",
            series.len()
        )));
    }
    let targets: Vec<usize> = (c..series.len()).collect();
    let predictions = predict_points(
        params, model, sched, series, &targets, pc.samples, pc.seed, iteration, false,
    )?;
    let residuals: Vec<f64> = predictions
        .iter()
        .filter(|p| p.index < train_len)
        .map(|p| series.values[p.index] - p.mu)
        .collect();
    let error = estimate_error_variance(
        &residuals,
        pc.resample_count,
        pc.subset_fraction,
        &mut resample_rng(pc.seed, iteration),
    )?;
    let p_o = predictions
        .iter()
        .map(|p| {
            outlier_probability(
                series.values[p.index],
                p.mu,
                p.sigma * p.sigma,
                error.sigma2,
                pc.samples,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    let flagged: Vec<bool> = p_o.iter().map(|&p| classify(p, pc.threshold)).collect();
    let mut a = Assessment {
        predictions,
        error,
        p_o,
        flagged,
        qes: 0.0,
    };
    a.qes = a.qes_with_k(train_len, c, pc.k)?;
    Ok(a)
}

/// One entry of the low-quality set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowQualityPoint {
    pub index: usize,
    pub timestamp: String,
    pub original: f64,
    /// Value written to the cleaned series; `None` in the forecast horizon,
    /// which is reported but never imputed.
    pub imputed: Option<f64>,
    pub p_o: f64,
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lr0: f64,
    pub sigma2: f64,
    /// Relative change against the previous round; absent in round 0.
    pub sigma2_change: Option<f64>,
    pub qes: f64,
    pub flagged_train: usize,
    pub flagged_horizon: usize,
    pub newly_flagged: usize,
    /// Indices flagged in this round.
    pub flagged: Vec<usize>,
    /// Outlier probabilities of `flagged`, in the same order.
    pub flagged_p_o: Vec<f64>,
    pub loss_history: Vec<EpochRecord>,
    /// Forecast error on horizon points that are not outliers.
    pub horizon_error: Option<ErrorMetrics>,
    /// Detection quality of the cumulative flag set against labels.
    pub detection: Option<Detection>,
}

/// Final per-point view, raw units.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointRecord {
    pub index: usize,
    pub value: f64,
    pub mu: f64,
    pub sigma_total: f64,
    pub p_o: f64,
    pub flagged: bool,
}

/// Raw-unit prediction of one round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RawPrediction {
    pub index: usize,
    pub mu: f64,
    pub sigma: f64,
    pub sigma2: f64,
}

pub struct CleaningResult {
    pub cleaned: TimeSeriesDataset,
    /// Ordered by index.
    pub low_quality: Vec<LowQualityPoint>,
    pub iterations: Vec<IterationRecord>,
    pub points: Vec<PointRecord>,
    pub converged: bool,
    pub train_len: usize,
    pub normalizer: Normalizer,
    pub params: ModelParams,
    /// Weights after each round's training, in round order.
    pub round_params: Vec<ModelParams>,
    /// Predictions of the first and the last round.
    pub first_predictions: Vec<RawPrediction>,
    pub last_predictions: Vec<RawPrediction>,
    /// Last round's assessment, in scaled units.
    pub last: Assessment,
}

impl IterationRecord {
    /// The round's quality score recomputed with another `k`.
    pub fn qes_with_k(&self, train_len: usize, context: usize, k: f64) -> Result<f64> {
        let probs: Vec<f64> = self
            .flagged
            .iter()
            .zip(&self.flagged_p_o)
            .filter(|(&t, _)| t < train_len)
            .map(|(_, &p)| p)
            .collect();
        qes(&probs, train_len - context, k)
    }
}

impl CleaningResult {
    pub fn iterations_used(&self) -> usize {
        self.iterations.len()
    }

    /// Cumulative flags over `0..len`.
    pub fn flag_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.cleaned.len()];
        for u in &self.low_quality {
            m[u.index] = true;
        }
        m
    }

    pub fn qes_history(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.qes).collect()
    }
}

/// Splits and validates, returning the training length.
pub fn training_split(ds: &TimeSeriesDataset, pc: &PipelineConfig, model: &ModelConfig) -> Result<usize> {
    let n = ds.train_len(pc.train_fraction);
    if n < model.context_len + 2 {
        return Err(Error::invalid(format!(
            "training split of {n} points is too short for context length {} (need at least C+2)",
            model.context_len
        )));
    }
    Ok(n)
}

fn raw_predictions(a: &Assessment, norm: &Normalizer) -> Vec<RawPrediction> {
    let s = norm.spread();
    a.predictions
        .iter()
        .map(|p| RawPrediction {
            index: p.index,
            mu: norm.unscale(p.mu),
            sigma: p.sigma * s,
            sigma2: a.error.sigma2 * s * s,
        })
        .collect()
}

/// Horizon error on points that are neither labeled nor (without labels)
/// flagged as outliers.
fn horizon_error(
    ds: &TimeSeriesDataset,
    a: &Assessment,
    norm: &Normalizer,
    train_len: usize,
    flags: &[bool],
) -> Option<ErrorMetrics> {
    let mut y = Vec::new();
    let mut yhat = Vec::new();
    for p in a.predictions.iter().filter(|p| p.index >= train_len) {
        let outlier = match &ds.labels {
            Some(l) => l[p.index],
            None => flags[p.index],
        };
        if !outlier {
            y.push(ds.values[p.index]);
            yhat.push(norm.unscale(p.mu));
        }
    }
    if y.is_empty() {
        return None;
    }
    mse_lmae(&y, &yhat).ok()
}

fn detection(ds: &TimeSeriesDataset, flags: &[bool], context: usize) -> Option<Detection> {
    let labels = ds.labels.as_ref()?;
    precision_recall_f1(&flags[context..], &labels[context..]).ok()
}

/// Runs the full loop on `ds`. Non-convergence within `max_iterations` is
/// reported through [`CleaningResult::converged`], not as an error.
pub fn run_cleaning(ds: &TimeSeriesDataset, cfg: &CleaningConfig) -> Result<CleaningResult> {
    run_cleaning_from(ds, cfg, None)
}

/// [`run_cleaning`] starting from given parameters instead of a fresh
/// initialization.
pub fn run_cleaning_from(
    ds: &TimeSeriesDataset,
    cfg: &CleaningConfig,
    init: Option<ModelParams>,
) -> Result<CleaningResult> {
    cfg.validate()?;
    let (pc, model) = (&cfg.pipeline, &cfg.model);
    let train_len = training_split(ds, pc, model)?;
    let sched = pc.schedule()?;
    let norm = Normalizer::fit(&ds.values[..train_len], pc.quartile_scaling)?;
    let mut params = match init {
        Some(p) => p,
        None => init_params(pc.seed, model)?,
    };
    let mut current = ds.clone();
    let mut flags = vec![false; ds.len()];
    let mut low_quality: Vec<LowQualityPoint> = Vec::new();
    let mut iterations = Vec::new();
    let mut prev_sigma2: Option<f64> = None;
    let mut converged = false;
    let mut first_predictions = Vec::new();
    let mut round_params = Vec::new();
    let mut last = None;

    for iteration in 0..pc.max_iterations {
        let series = ScaledSeries::new(&current, &norm);
        let (trained, history) = train(
            params, model, &cfg.train, &sched, &series, train_len, pc.seed, iteration,
        )?;
        params = trained;
        round_params.push(params.clone());
        let a = assess(&params, model, pc, &sched, &series, train_len, iteration)?;
        let sigma2 = a.error.sigma2;
        let change = prev_sigma2.map(|p| (sigma2 - p).abs() / p.max(1e-12));
        let done = prev_sigma2.is_some_and(|p| check_convergence(p, sigma2, pc.tau));

        let mut flagged_now = Vec::new();
        let mut flagged_p_o = Vec::new();
        let mut newly = 0;
        for ((p, &po), &f) in a.predictions.iter().zip(&a.p_o).zip(&a.flagged) {
            if !f {
                continue;
            }
            let t = p.index;
            flagged_now.push(t);
            flagged_p_o.push(po);
            let in_train = t < train_len;
            let value = norm.unscale(p.mu);
            if in_train {
                impute(&mut current, train_len, t, value)?;
            }
            if !flags[t] {
                flags[t] = true;
                newly += 1;
                low_quality.push(LowQualityPoint {
                    index: t,
                    timestamp: ds.format_timestamp(t),
                    original: ds.values[t],
                    imputed: in_train.then_some(value),
                    p_o: po,
                    iteration,
                });
            } else if in_train {
                if let Some(u) = low_quality.iter_mut().find(|u| u.index == t) {
                    u.imputed = Some(value);
                }
            }
        }
        let flagged_train = flagged_now.iter().filter(|&&t| t < train_len).count();
        if iteration == 0 {
            first_predictions = raw_predictions(&a, &norm);
        }
        iterations.push(IterationRecord {
            iteration,
            lr0: cfg.train.iteration_lr0(iteration),
            sigma2,
            sigma2_change: change,
            qes: a.qes,
            flagged_train,
            flagged_horizon: flagged_now.len() - flagged_train,
            newly_flagged: newly,
            flagged: flagged_now,
            flagged_p_o,
            loss_history: history,
            horizon_error: horizon_error(ds, &a, &norm, train_len, &flags),
            detection: detection(ds, &flags, model.context_len),
        });
        prev_sigma2 = Some(sigma2);
        last = Some(a);
        if done {
            converged = true;
            break;
        }
    }

    let last = last.expect("at least one iteration");
    low_quality.sort_by_key(|u| u.index);
    let spread = norm.spread();
    let points = last
        .predictions
        .iter()
        .zip(&last.p_o)
        .map(|(p, &po)| {
            let t = p.index;
            let p_o = low_quality
                .binary_search_by_key(&t, |u| u.index)
                .map_or(po, |i| low_quality[i].p_o);
            PointRecord {
                index: t,
                value: ds.values[t],
                mu: norm.unscale(p.mu),
                sigma_total: (p.sigma * p.sigma + last.error.sigma2).sqrt() * spread,
                p_o,
                flagged: flags[t],
            }
        })
        .collect();
    Ok(CleaningResult {
        cleaned: current,
        low_quality,
        iterations,
        points,
        converged,
        train_len,
        normalizer: norm,
        params,
        round_params,
        first_predictions,
        last_predictions: raw_predictions(&last, &norm),
        last,
    })
}
