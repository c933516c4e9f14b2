// SPDX-License-Identifier: MIT OR Apache-2.0

//! Outlier probabilities, the dataset quality score and evaluation metrics.

use serde::Serialize;

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability that all `m` draws from the predictive Gaussian land closer
/// to its mean than `x` does: `(1 - 2 Phi(-|z|))^m`.
pub fn outlier_probability(x: f64, mu: f64, sigma_t2: f64, sigma2: f64, m: usize) -> Result<f64> {
    let var = sigma_t2 + sigma2;
    if !(var > 0.0) {
        return Err(Error::Degenerate(format!(
            "total predictive variance is {var} (sigma_t^2 = {sigma_t2}, sigma^2 = {sigma2})"
        )));
    }
    if m == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    Ok(probability_from_z((x - mu).abs() / var.sqrt(), m))
}

/// [`outlier_probability`] from the standardized distance.
pub fn probability_from_z(z_abs: f64, m: usize) -> f64 {
    // 1 - 2 Phi(-z) = 1 - erfc(z / sqrt 2); the log form keeps precision
    // when the base is close to 1 and m is large
    let tail = libm::erfc(z_abs / std::f64::consts::SQRT_2);
    if tail >= 1.0 {
        return 0.0;
    }
    (m as f64 * (-tail).ln_1p()).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OutlierScore {
    pub index: usize,
    pub p_o: f64,
    pub z_abs: f64,
    pub flagged: bool,
}

/// Strictly above the threshold.
pub fn classify(p_o: f64, threshold: f64) -> bool {
    p_o > threshold
}

/// `1 - 2ab / (a + b)` with `a = min(Q / (k span), 1)` and `b` the mean
/// flagged probability; 1 when nothing is flagged.
pub fn qes(flagged_probs: &[f64], span: usize, k: f64) -> Result<f64> {
    if span == 0 {
        return Err(Error::invalid("QES needs a non-empty evaluation span"));
    }
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::invalid(format!("QES factor k must lie in (0, 1), got {k}")));
    }
    let q = flagged_probs.len();
    if q > span {
        return Err(Error::invalid(format!("{q} flagged points exceed the span of {span}")));
    }
    if q == 0 {
        return Ok(1.0);
    }
    let a = (q as f64 / (k * span as f64)).min(1.0);
    let b = flagged_probs.iter().sum::<f64>() / q as f64;
    if a + b == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - 2.0 * a * b / (a + b))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Detection {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Precision or recall had a zero denominator and was reported as 0.
    pub undefined: bool,
}

pub fn precision_recall_f1(flags: &[bool], labels: &[bool]) -> Result<Detection> {
    if flags.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions against {} labels",
            flags.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&f, &l) in flags.iter().zip(labels) {
        match (f, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let mut undefined = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            undefined = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Detection {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
        undefined,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorMetrics {
    pub mse: f64,
    pub lmae: f64,
    pub count: usize,
}

/// Mean squared error and mean absolute error of `log(1 + y)`.
pub fn mse_lmae(y: &[f64], yhat: &[f64]) -> Result<ErrorMetrics> {
    if y.len() != yhat.len() {
        return Err(Error::Dimension(format!(
            "{} targets against {} predictions",
            y.len(),
            yhat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::invalid("no points to evaluate"));
    }
    let bad: Vec<usize> = y
        .iter()
        .zip(yhat)
        .enumerate()
        .filter(|(_, (a, b))| !(**a + 1.0 > 0.0 && **b + 1.0 > 0.0))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        let shown: Vec<String> = bad.iter().take(10).map(|i| i.to_string()).collect();
        return Err(Error::invalid(format!(
            "log error needs values above -1; violated at {} point(s): {}{}",
            bad.len(),
            shown.join(", "),
            if bad.len() > 10 { ", ..." } else { "" }
        )));
    }
    let n = y.len() as f64;
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let lmae = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| (a.ln_1p() - b.ln_1p()).abs())
        .sum::<f64>()
        / n;
    Ok(ErrorMetrics {
        mse,
        lmae,
        count: y.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson integration of the standard normal density.
    fn phi_by_quadrature(x: f64) -> f64 {
        let n = 200_000;
        let (a, b) = (0.0, x.abs());
        let h = (b - a) / n as f64;
        let pdf = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(a) + pdf(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(a + i as f64 * h);
        }
        let half = s * h / 3.0;
        if x >= 0.0 {
            0.5 + half
        } else {
            0.5 - half
        }
    }

    #[test]
    fn cdf_matches_quadrature() {
        for &x in &[-6.0, -3.0, -1.0, -0.2, 0.0, 0.7, 2.5] {
            assert!((normal_cdf(x) - phi_by_quadrature(x)).abs() < 1e-12, "{x}");
        }
        assert!((normal_cdf(-3.0) - 1.3499e-3).abs() < 1e-7);
    }

    #[test]
    fn probability_reference_values() {
        assert_eq!(outlier_probability(1.0, 1.0, 0.5, 0.5, 100).unwrap(), 0.0);
        let base3 = 1.0 - 2.0 * phi_by_quadrature(-3.0);
        let p = outlier_probability(3.0, 0.0, 1.0, 0.0, 100).unwrap();
        assert!((p - base3.powi(100)).abs() < 1e-10);
        assert!((p - 0.7631).abs() < 1e-4);
        let p1 = outlier_probability(1.0, 0.0, 0.6, 0.4, 1).unwrap();
        assert!((p1 - 0.6827).abs() < 1e-4);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        assert!(matches!(
            outlier_probability(1.0, 0.0, 0.0, 0.0, 10),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn threshold_is_strict() {
        assert!(classify(0.51, 0.5));
        assert!(!classify(0.5, 0.5));
        assert!(!classify(0.0, 0.5));
    }

    #[test]
    fn qes_reference_values() {
        assert_eq!(qes(&[], 100, 0.1).unwrap(), 1.0);
        // a = b = 0.2
        let probs = vec![0.2; 20];
        assert!((qes(&probs, 1000, 0.1).unwrap() - 0.8).abs() < 1e-12);
        let probs = vec![0.8; 20];
        assert!((qes(&probs, 1000, 0.1).unwrap() - 0.68).abs() < 1e-12);
        assert!(qes(&[0.9], 0, 0.1).is_err());
    }

    #[test]
    fn qes_clamps_large_fractions() {
        let probs = vec![0.9; 500];
        let v = qes(&probs, 1000, 0.1).unwrap();
        assert!((v - (1.0 - 2.0 * 0.9 / 1.9)).abs() < 1e-12);
    }

    #[test]
    fn detection_arithmetic() {
        let mut flags = vec![true; 10];
        flags.extend(vec![false; 3]);
        let mut labels = vec![true; 9];
        labels.push(false);
        labels.extend(vec![true; 3]);
        let d = precision_recall_f1(&flags, &labels).unwrap();
        assert!((d.precision - 0.9).abs() < 1e-15);
        assert!((d.recall - 0.75).abs() < 1e-15);
        assert!((d.f1 - 2.0 * 0.675 / 1.65).abs() < 1e-12);
        let none = precision_recall_f1(&[false, false], &[true, false]).unwrap();
        assert_eq!((none.recall, none.f1), (0.0, 0.0));
        assert!(none.undefined);
        assert!(precision_recall_f1(&[true], &[]).is_err());
    }

    #[test]
    fn error_metric_examples() {
        let m = mse_lmae(&[1.0, 3.0], &[2.0, 2.0]).unwrap();
        assert_eq!(m.mse, 1.0);
        let m = mse_lmae(&[0.0], &[std::f64::consts::E - 1.0]).unwrap();
        assert!((m.lmae - 1.0).abs() < 1e-15);
        let m = mse_lmae(&[4.0, 5.0], &[4.0, 5.0]).unwrap();
        assert_eq!((m.mse, m.lmae), (0.0, 0.0));
        let err = mse_lmae(&[0.0, -2.0], &[0.0, 0.0]).unwrap_err().to_string();
        assert!(err.contains('1'), "{err}");
    }
}
