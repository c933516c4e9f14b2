// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled synthetic series: periodic signal, trend and Gaussian noise with
//! injected spikes, level shifts and stuck segments.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{TimeSeriesDataset, TimestampFormat};
use crate::error::{Error, Result};
use crate::stream_rng;

const SYNTH_STREAM: u64 = 4;
/// 2024-01-01T00:00:00Z.
const DEFAULT_START_MS: i64 = 1_704_067_200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierKind {
    /// Single point offset by `magnitude` noise standard deviations.
    Spike,
    /// Contiguous segment shifted by a constant offset.
    LevelShift,
    /// Contiguous segment frozen at the value preceding it.
    Stuck,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineComponent {
    pub amplitude: f64,
    /// Period in samples.
    pub period: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub length: usize,
    /// Seconds between samples.
    pub sampling_interval: i64,
    pub start_ms: i64,
    pub components: Vec<SineComponent>,
    /// Added per sample.
    pub trend: f64,
    /// Constant level; keeps the signal positive for log-error metrics.
    pub offset: f64,
    pub noise_std: f64,
    pub contamination_rate: f64,
    pub kinds: Vec<OutlierKind>,
    /// Length of level-shift and stuck segments.
    pub segment_len: usize,
    /// Range of spike and level-shift offsets, in noise standard deviations.
    pub magnitude: [f64; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            length: 10_000,
            sampling_interval: 600,
            start_ms: DEFAULT_START_MS,
            components: vec![
                SineComponent {
                    amplitude: 3.0,
                    period: 144.0,
                },
                SineComponent {
                    amplitude: 1.0,
                    period: 1008.0,
                },
            ],
            trend: 1e-4,
            offset: 20.0,
            noise_std: 0.2,
            contamination_rate: 0.02,
            kinds: vec![OutlierKind::Spike],
            segment_len: 5,
            magnitude: [5.0, 12.0],
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::Config("synthetic length must be at least 2".into()));
        }
        if self.sampling_interval <= 0 {
            return Err(Error::Config("sampling_interval must be positive".into()));
        }
        if !(0.0..=0.2).contains(&self.contamination_rate) {
            return Err(Error::Config("contamination_rate must lie in [0, 0.2]".into()));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::Config("noise_std must be positive".into()));
        }
        if self.contamination_rate > 0.0 && self.kinds.is_empty() {
            return Err(Error::Config("contamination needs at least one outlier kind".into()));
        }
        if self.kinds.iter().any(|k| *k != OutlierKind::Spike) && self.segment_len == 0 {
            return Err(Error::Config("segment_len must be positive".into()));
        }
        let [lo, hi] = self.magnitude;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config("magnitude must satisfy 0 < low <= high".into()));
        }
        if self.components.iter().any(|c| !(c.period > 0.0)) {
            return Err(Error::Config("sine periods must be positive".into()));
        }
        Ok(())
    }

    /// Exact number of labeled points.
    pub fn outlier_count(&self) -> usize {
        (self.contamination_rate * self.length as f64).round() as usize
    }
}

/// Generates the series. The clean signal is stored alongside; labels mark
/// exactly the modified indices. Outliers never touch the first point and
/// are separated from each other by at least one clean point.
pub fn generate(spec: &SynthSpec) -> Result<TimeSeriesDataset> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, SYNTH_STREAM, 0, 0);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let n = spec.length;
    let clean: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64;
            let periodic: f64 = spec
                .components
                .iter()
                .map(|c| c.amplitude * (std::f64::consts::TAU * t / c.period).sin())
                .sum();
            spec.offset + spec.trend * t + periodic + noise.sample(&mut rng)
        })
        .collect();

    // split the budget into events, each covering 1 (spike) or
    // segment_len points; the last event may be shortened to hit the count
    let target = spec.outlier_count();
    let mut events: Vec<(OutlierKind, usize)> = Vec::new();
    let mut covered = 0;
    while covered < target {
        let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
        let len = match kind {
            OutlierKind::Spike => 1,
            _ => spec.segment_len.min(target - covered),
        };
        events.push((kind, len));
        covered += len;
    }
    let needed: usize = events.iter().map(|(_, l)| l + 1).sum();
    if needed > n.saturating_sub(1) {
        return Err(Error::invalid(format!(
            "cannot place {target} outlier points as separated events in {n} samples"
        )));
    }
    // random non-overlapping placement: distribute the free points among
    // the gaps before each event
    let free = n - 1 - needed;
    let mut cuts: Vec<usize> = (0..events.len()).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    events.shuffle(&mut rng);

    let mut values = clean.clone();
    let mut labels = vec![false; n];
    let mut pos = 1;
    let mut used = 0;
    for (&(kind, len), &cut) in events.iter().zip(&cuts) {
        pos += cut - used;
        used = cut;
        let magnitude = rng.random_range(spec.magnitude[0]..=spec.magnitude[1]) * spec.noise_std;
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for i in pos..pos + len {
            values[i] = match kind {
                OutlierKind::Spike | OutlierKind::LevelShift => clean[i] + sign * magnitude,
                OutlierKind::Stuck => values[pos - 1],
            };
            labels[i] = true;
        }
        pos += len + 1;
    }

    let timestamps = (0..n as i64)
        .map(|i| spec.start_ms + i * spec.sampling_interval * 1000)
        .collect();
    let mut ds = TimeSeriesDataset::new(timestamps, values)?.with_labels(labels)?;
    ds.clean = Some(clean);
    ds.format = TimestampFormat::Iso8601;
    Ok(ds)
}
