// SPDX-License-Identifier: MIT OR Apache-2.0

//! Univariate series loading, validation, robust scaling, covariates and
//! training windows.
//!
//! Indices are 0-based throughout: the first target with a full context of
//! `C` values is index `C`, and a training split of `N` points yields the
//! `N - C` windows with targets `C..N`.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of calendar/position features in every covariate vector.
pub const TIME_FEATURES: usize = 7;

/// How timestamps were written in the source file; output files reuse it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimestampFormat {
    EpochSeconds,
    Iso8601,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    /// Milliseconds since the Unix epoch, strictly increasing.
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
    /// `true` where the pipeline replaced the observation with a prediction.
    pub mask: Vec<bool>,
    /// Ground-truth outlier flags, when the source carries them.
    pub labels: Option<Vec<bool>>,
    /// Outlier-free signal, when known (synthetic data).
    pub clean: Option<Vec<f64>>,
    pub interval_ms: i64,
    pub format: TimestampFormat,
}

impl TimeSeriesDataset {
    /// Builds a dataset from parallel timestamp/value arrays, checking the
    /// uniform-sampling and finiteness invariants. The mask starts all-zero.
    pub fn new(timestamps: Vec<i64>, values: Vec<f64>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} timestamps vs {} values",
                timestamps.len(),
                values.len()
            )));
        }
        if values.is_empty() {
            return Err(Error::invalid("series is empty"));
        }
        if let Some((row, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: row + 1,
                value: v.to_string(),
            });
        }
        let interval_ms = check_uniform(&timestamps)?;
        let n = values.len();
        Ok(Self {
            timestamps,
            values,
            mask: vec![false; n],
            labels: None,
            clean: None,
            interval_ms,
            format: TimestampFormat::Iso8601,
        })
    }

    pub fn with_labels(mut self, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} labels for {} points",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Length of the chronological training split for `fraction` of the data.
    pub fn train_len(&self, fraction: f64) -> usize {
        ((self.len() as f64) * fraction).floor() as usize
    }

    pub fn imputed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn format_timestamp(&self, index: usize) -> String {
        format_timestamp(self.timestamps[index], self.format)
    }

    /// Applies `x -> a*x + b` to every value (and the clean signal).
    pub fn affine(&self, a: f64, b: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = a * *v + b);
        if let Some(c) = out.clean.as_mut() {
            c.iter_mut().for_each(|v| *v = a * *v + b);
        }
        out
    }
}

fn check_uniform(ts: &[i64]) -> Result<i64> {
    if ts.len() < 2 {
        return Ok(0);
    }
    let interval = ts[1] - ts[0];
    if interval <= 0 {
        return Err(Error::Timestamps {
            row: 2,
            message: "not increasing".into(),
        });
    }
    for (i, w) in ts.windows(2).enumerate() {
        let d = w[1] - w[0];
        if d <= 0 {
            return Err(Error::Timestamps {
                row: i + 2,
                message: "not increasing".into(),
            });
        }
        if d != interval {
            return Err(Error::Timestamps {
                row: i + 2,
                message: format!("non-uniform interval: {} ms after {} ms", d, interval),
            });
        }
    }
    Ok(interval)
}

/// Column names and delimiter of a series file.
#[derive(Clone, Debug)]
pub struct ColumnSpec {
    pub timestamp: String,
    pub value: String,
    /// Optional ground-truth column; read when present in the header.
    pub label: String,
    /// Optional clean-signal column; read when present in the header.
    pub clean: String,
    pub delimiter: u8,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            value: "value".into(),
            label: "label".into(),
            clean: "clean".into(),
            delimiter: b',',
        }
    }
}

/// Parses an integer epoch-seconds value or an ISO-8601 instant into
/// milliseconds since the epoch.
pub fn parse_timestamp(raw: &str) -> Option<(i64, TimestampFormat)> {
    let s = raw.trim();
    if let Ok(secs) = s.parse::<i64>() {
        return secs.checked_mul(1000).map(|ms| (ms, TimestampFormat::EpochSeconds));
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some((dt.timestamp_millis(), TimestampFormat::Iso8601));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some((dt.and_utc().timestamp_millis(), TimestampFormat::Iso8601));
        }
    }
    None
}

pub fn format_timestamp(ms: i64, format: TimestampFormat) -> String {
    match format {
        TimestampFormat::EpochSeconds => {
            if ms % 1000 == 0 {
                (ms / 1000).to_string()
            } else {
                format!("{:.3}", ms as f64 / 1000.0)
            }
        }
        TimestampFormat::Iso8601 => {
            let dt = DateTime::<Utc>::from_timestamp_millis(ms).unwrap_or_default();
            if ms % 1000 == 0 {
                dt.format("%Y-%m-%dT%H:%M:%SZ").to_string()
            } else {
                dt.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
            }
        }
    }
}

fn parse_flag(raw: &str) -> Option<bool> {
    match raw.trim() {
        "0" | "false" | "False" | "FALSE" => Some(false),
        "1" | "true" | "True" | "TRUE" => Some(true),
        _ => None,
    }
}

/// Reads a delimiter-separated series with a header row.
///
/// Lines starting with `#` are ignored. Rows are numbered from 1 (the first
/// data row) in every error.
pub fn load_series(path: &Path, cols: &ColumnSpec) -> Result<TimeSeriesDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(cols.delimiter)
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            message: format!("header: {e}"),
        })?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = find(&cols.timestamp).ok_or_else(|| Error::Parse {
        row: 0,
        message: format!("missing column `{}`", cols.timestamp),
    })?;
    let val_col = find(&cols.value).ok_or_else(|| Error::Parse {
        row: 0,
        message: format!("missing column `{}`", cols.value),
    })?;
    let label_col = find(&cols.label);
    let clean_col = find(&cols.clean);

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut clean = Vec::new();
    let mut format = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let (ts, fmt) = parse_timestamp(&record[ts_col]).ok_or_else(|| Error::Parse {
            row,
            message: format!("unparseable timestamp `{}`", &record[ts_col]),
        })?;
        format.get_or_insert(fmt);
        timestamps.push(ts);

        let raw = &record[val_col];
        let v: f64 = raw.parse().map_err(|_| Error::Parse {
            row,
            message: format!("unparseable value `{raw}`"),
        })?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row,
                value: raw.to_string(),
            });
        }
        values.push(v);

        if let Some(c) = label_col {
            labels.push(parse_flag(&record[c]).ok_or_else(|| Error::Parse {
                row,
                message: format!("bad label `{}`", &record[c]),
            })?);
        }
        if let Some(c) = clean_col {
            clean.push(record[c].parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("bad clean value `{}`", &record[c]),
            })?);
        }
    }
    if values.is_empty() {
        return Err(Error::Parse {
            row: 0,
            message: "no data rows".into(),
        });
    }
    let mut ds = TimeSeriesDataset::new(timestamps, values)?;
    ds.format = format.unwrap_or(TimestampFormat::Iso8601);
    if label_col.is_some() {
        ds.labels = Some(labels);
    }
    if clean_col.is_some() {
        ds.clean = Some(clean);
    }
    Ok(ds)
}

/// An extra output column: header plus one pre-formatted cell per row.
pub struct ExtraColumn<'a> {
    pub name: &'a str,
    pub cells: Vec<String>,
}

/// Writes `timestamp,value` followed by `extra` columns.
pub fn write_series(path: &Path, ds: &TimeSeriesDataset, extra: &[ExtraColumn<'_>]) -> Result<()> {
    let out = render_series(ds, extra)?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// The text [`write_series`] writes.
pub fn render_series(ds: &TimeSeriesDataset, extra: &[ExtraColumn<'_>]) -> Result<String> {
    for col in extra {
        if col.cells.len() != ds.len() {
            return Err(Error::Dimension(format!(
                "column `{}` has {} cells for {} rows",
                col.name,
                col.cells.len(),
                ds.len()
            )));
        }
    }
    let mut out = String::with_capacity(ds.len() * 40);
    out.push_str("timestamp,value");
    for col in extra {
        out.push(',');
        out.push_str(col.name);
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&ds.format_timestamp(i));
        out.push(',');
        out.push_str(&format_value(ds.values[i]));
        for col in extra {
            out.push(',');
            out.push_str(&col.cells[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_value(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

/// Robust scaler: `(x - median) / (q75 - q25)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuartileScaler {
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

/// Percentile of sorted data by linear interpolation between the closest
/// order statistics (position `p * (n - 1)`).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn fit_scaler(train_values: &[f64]) -> Result<QuartileScaler> {
    if train_values.len() < 4 {
        return Err(Error::invalid(format!(
            "need at least 4 values to fit the scaler, got {}",
            train_values.len()
        )));
    }
    let mut sorted = train_values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let s = QuartileScaler {
        q25: percentile_sorted(&sorted, 0.25),
        q50: percentile_sorted(&sorted, 0.50),
        q75: percentile_sorted(&sorted, 0.75),
    };
    if !(s.q75 - s.q25 > 0.0) {
        return Err(Error::Degenerate(
            "interquartile range of the training split is zero".into(),
        ));
    }
    Ok(s)
}

impl QuartileScaler {
    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

pub fn scale(x: f64, s: &QuartileScaler) -> f64 {
    (x - s.q50) / s.iqr()
}

pub fn unscale(y: f64, s: &QuartileScaler) -> f64 {
    y * s.iqr() + s.q50
}

/// Value normalization used by the model. `ZScore` exists for the
/// scaling ablation only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalizer {
    Quartile(QuartileScaler),
    ZScore { mean: f64, std: f64 },
}

impl Normalizer {
    pub fn fit(train_values: &[f64], quartile: bool) -> Result<Self> {
        if quartile {
            return fit_scaler(train_values).map(Normalizer::Quartile);
        }
        if train_values.len() < 4 {
            return Err(Error::invalid("need at least 4 values to fit the scaler"));
        }
        let n = train_values.len() as f64;
        let mean = train_values.iter().sum::<f64>() / n;
        let var = train_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        if !(var > 0.0) {
            return Err(Error::Degenerate("training split has zero variance".into()));
        }
        Ok(Normalizer::ZScore { mean, std: var.sqrt() })
    }

    pub fn scale(&self, x: f64) -> f64 {
        match self {
            Normalizer::Quartile(s) => scale(x, s),
            Normalizer::ZScore { mean, std } => (x - mean) / std,
        }
    }

    pub fn unscale(&self, y: f64) -> f64 {
        match self {
            Normalizer::Quartile(s) => unscale(y, s),
            Normalizer::ZScore { mean, std } => y * std + mean,
        }
    }

    /// Multiplier that maps a spread in scaled units back to raw units.
    pub fn spread(&self) -> f64 {
        match self {
            Normalizer::Quartile(s) => s.iqr(),
            Normalizer::ZScore { std, .. } => *std,
        }
    }
}

/// Cyclic calendar encodings plus a linear position term:
/// `[sin/cos hour-of-day, sin/cos day-of-week, sin/cos day-of-year, index/(len-1)]`.
pub fn time_features(ts_ms: i64, index: usize, len: usize) -> [f64; TIME_FEATURES] {
    let dt = DateTime::<Utc>::from_timestamp_millis(ts_ms).unwrap_or_default();
    let day_frac = (dt.hour() as f64
        + dt.minute() as f64 / 60.0
        + (dt.second() as f64 + dt.timestamp_subsec_millis() as f64 / 1000.0) / 3600.0)
        / 24.0;
    let week_frac = dt.weekday().num_days_from_monday() as f64 / 7.0;
    let year_days = if chrono::NaiveDate::from_ymd_opt(dt.year(), 2, 29).is_some() {
        366.0
    } else {
        365.0
    };
    let year_frac = dt.ordinal0() as f64 / year_days;
    let pos = if len > 1 { index as f64 / (len - 1) as f64 } else { 0.0 };
    [
        (TAU * day_frac).sin(),
        (TAU * day_frac).cos(),
        (TAU * week_frac).sin(),
        (TAU * week_frac).cos(),
        (TAU * year_frac).sin(),
        (TAU * year_frac).cos(),
        pos,
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovariateVector {
    pub time_features: [f64; TIME_FEATURES],
    pub lag_features: Vec<f64>,
}

impl CovariateVector {
    pub fn dim(&self) -> usize {
        TIME_FEATURES + self.lag_features.len()
    }

    /// Flattened `[time features ; lags]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.time_features.to_vec();
        v.extend_from_slice(&self.lag_features);
        v
    }
}

/// Scaled view of a dataset: everything the networks consume.
#[derive(Clone, Debug)]
pub struct ScaledSeries {
    pub values: Vec<f64>,
    pub time: Vec<[f64; TIME_FEATURES]>,
    pub mask: Vec<bool>,
}

impl ScaledSeries {
    pub fn new(ds: &TimeSeriesDataset, norm: &Normalizer) -> Self {
        let n = ds.len();
        Self {
            values: ds.values.iter().map(|&v| norm.scale(v)).collect(),
            time: (0..n).map(|i| time_features(ds.timestamps[i], i, n)).collect(),
            mask: ds.mask.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Writes the covariate fed to the recurrent network at step `pos` of
    /// the window whose target is `target` (`target - context < pos <= target`).
    /// Lag slots reaching before the window start are zero (the scaled
    /// median); at `pos == target` this is exactly `build_covariates(target)`.
    pub fn write_position_covariate(&self, target: usize, pos: usize, context: usize, out: &mut [f64]) {
        debug_assert!(pos <= target && pos + context > target);
        debug_assert_eq!(out.len(), TIME_FEATURES + context);
        out[..TIME_FEATURES].copy_from_slice(&self.time[pos]);
        let start = target - context;
        let lags = &mut out[TIME_FEATURES..];
        // slot k holds value index pos - context + k
        for (k, slot) in lags.iter_mut().enumerate() {
            let idx = pos + k;
            *slot = if idx >= start + context {
                self.values[idx - context]
            } else {
                0.0
            };
        }
    }
}

/// Covariate for target index `t`: time features of `t` and the `C` scaled
/// values `t-C .. t-1`.
pub fn build_covariates(
    t: usize,
    ds: &TimeSeriesDataset,
    norm: &Normalizer,
    context: usize,
) -> Result<CovariateVector> {
    if t < context || t >= ds.len() {
        return Err(Error::OutOfRange {
            index: t,
            range: format!("[{}, {})", context, ds.len()),
        });
    }
    Ok(CovariateVector {
        time_features: time_features(ds.timestamps[t], t, ds.len()),
        lag_features: ds.values[t - context..t].iter().map(|&v| norm.scale(v)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub context: Vec<f64>,
    pub target: f64,
    pub target_index: usize,
    /// Any mask bit set within `[t - C, t]`.
    pub contains_imputed: bool,
}

/// All `N - C` windows of the first `train_len` points.
pub fn make_windows(series: &ScaledSeries, train_len: usize, context: usize) -> Result<Vec<Window>> {
    if context == 0 {
        return Err(Error::invalid("context length must be positive"));
    }
    if train_len > series.len() {
        return Err(Error::invalid(format!(
            "training split {} exceeds series length {}",
            train_len,
            series.len()
        )));
    }
    if train_len < context + 1 {
        return Err(Error::invalid(format!(
            "training split of {} points is shorter than C+1 = {}",
            train_len,
            context + 1
        )));
    }
    Ok((context..train_len)
        .map(|t| Window {
            context: series.values[t - context..t].to_vec(),
            target: series.values[t],
            target_index: t,
            contains_imputed: series.mask[t - context..=t].iter().any(|&m| m),
        })
        .collect())
}

/// Replaces a training-split value with a model prediction and sets its
/// mask bit.
pub fn impute(ds: &mut TimeSeriesDataset, train_len: usize, index: usize, value: f64) -> Result<()> {
    if index >= train_len.min(ds.len()) {
        return Err(Error::OutOfRange {
            index,
            range: format!("[0, {})", train_len.min(ds.len())),
        });
    }
    if !value.is_finite() {
        return Err(Error::Numeric(format!("imputed value at {index} is not finite")));
    }
    ds.values[index] = value;
    ds.mask[index] = true;
    Ok(())
}
