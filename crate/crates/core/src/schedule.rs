// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear noise schedule and the closed-form diffusion identities.
//!
//! `beta[m]` is the per-step noise *standard deviation*: one forward step is
//! `x_m = sqrt(1 - beta_m^2) x_{m-1} + beta_m eps`. Arrays are indexed by the
//! step `m` in `0..=T`, with `m = 0` holding the clean-data convention
//! `alpha_bar = 1`, `beta_bar = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
    posterior_std: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule from `beta_min` (step 1) to `beta_max` (step T).
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("need T >= 2 diffusion steps, got {steps}")));
        }
        if !(0.0 <= beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 <= beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = (1..=steps)
            .map(|m| beta_min + (beta_max - beta_min) * (m - 1) as f64 / (steps - 1) as f64)
            .collect::<Vec<_>>();
        Self::from_betas(&betas)
    }

    /// Builds the derived arrays from explicit per-step betas (`betas[0]` is
    /// step 1). Each beta must lie in `[0, 1)`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::invalid(format!("beta {b} outside [0, 1)")));
        }
        let steps = betas.len();
        let mut beta = vec![0.0; steps + 1];
        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        let mut beta_bar = vec![0.0; steps + 1];
        let mut posterior_std = vec![0.0; steps + 1];
        for m in 1..=steps {
            beta[m] = betas[m - 1];
            alpha[m] = (1.0 - beta[m] * beta[m]).sqrt();
            alpha_bar[m] = alpha_bar[m - 1] * alpha[m];
            // 1 - alpha_bar^2 accumulated directly; subtracting from 1
            // loses most digits while the product is still close to 1
            let bb2 = beta_bar[m - 1] * beta_bar[m - 1] + alpha_bar[m - 1] * alpha_bar[m - 1] * beta[m] * beta[m];
            beta_bar[m] = bb2.sqrt();
            posterior_std[m] = if m == 1 || beta_bar[m] == 0.0 {
                0.0
            } else {
                beta_bar[m - 1] * beta[m] / beta_bar[m]
            };
        }
        Ok(Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            beta_bar,
            posterior_std,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, m: usize) -> f64 {
        self.beta[m]
    }

    /// `sqrt(1 - beta_m^2)`.
    pub fn alpha(&self, m: usize) -> f64 {
        self.alpha[m]
    }

    pub fn alpha_bar(&self, m: usize) -> f64 {
        self.alpha_bar[m]
    }

    pub fn beta_bar(&self, m: usize) -> f64 {
        self.beta_bar[m]
    }

    pub fn posterior_std(&self, m: usize) -> f64 {
        self.posterior_std[m]
    }

    fn check_step(&self, m: usize) -> Result<()> {
        if m == 0 || m > self.steps {
            return Err(Error::OutOfRange {
                index: m,
                range: format!("[1, {}]", self.steps),
            });
        }
        Ok(())
    }

    /// Samples `x_m | x_0` in closed form.
    pub fn forward_diffuse(&self, x0: f64, m: usize, eps: f64) -> Result<f64> {
        self.check_step(m)?;
        Ok(self.alpha_bar[m] * x0 + self.beta_bar[m] * eps)
    }

    /// Mean and standard deviation of `x_{m-1} | x_m, x_0`.
    pub fn posterior_params(&self, xm: f64, x0: f64, m: usize) -> Result<(f64, f64)> {
        self.check_step(m)?;
        if m == 1 {
            return Ok((x0, 0.0));
        }
        let bb2 = self.beta_bar[m] * self.beta_bar[m];
        let c0 = self.alpha_bar[m - 1] * self.beta[m] * self.beta[m] / bb2;
        let cm = self.alpha[m] * self.beta_bar[m - 1] * self.beta_bar[m - 1] / bb2;
        Ok((c0 * x0 + cm * xm, self.posterior_std[m]))
    }

    /// One ancestral sampling step `x_m -> x_{m-1}` given the predicted
    /// noise. `z` must be zero at `m = 1`.
    pub fn reverse_step(&self, xm: f64, eps_hat: f64, m: usize, z: f64) -> Result<f64> {
        self.check_step(m)?;
        if m == 1 && z != 0.0 {
            return Err(Error::invalid(
                "the final reverse step takes no noise (z must be 0 at m = 1)",
            ));
        }
        Ok(self.reverse_step_unchecked(xm, eps_hat, m, z))
    }

    #[inline]
    pub(crate) fn reverse_step_unchecked(&self, xm: f64, eps_hat: f64, m: usize, z: f64) -> f64 {
        let b = self.beta[m];
        (xm - b * b / self.beta_bar[m] * eps_hat) / self.alpha[m] + self.posterior_std[m] * z
    }

    /// Clean-value estimate implied by a noise prediction.
    pub fn predict_x0(&self, xm: f64, eps_hat: f64, m: usize) -> Result<f64> {
        self.check_step(m)?;
        Ok((xm - self.beta_bar[m] * eps_hat) / self.alpha_bar[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn default_schedule_endpoints() {
        let s = NoiseSchedule::linear(140, 1e-4, 0.1).unwrap();
        assert_eq!(s.steps(), 140);
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(140) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn three_step_interpolation() {
        // beta_max = 1 is outside the constructor contract; check the arithmetic directly
        let betas: Vec<f64> = (1..=3).map(|m| 0.0 + (1.0 - 0.0) * (m - 1) as f64 / 2.0).collect();
        assert_eq!(betas, vec![0.0, 0.5, 1.0]);
        assert!(NoiseSchedule::linear(3, 0.0, 1.0).is_err());
    }

    #[test]
    fn zero_betas_give_identity_chain() {
        let s = NoiseSchedule::from_betas(&[0.0; 5]).unwrap();
        for m in 1..=5 {
            assert_eq!(s.alpha_bar(m), 1.0);
            assert_eq!(s.beta_bar(m), 0.0);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, -0.1, 0.1).is_err());
        let s = NoiseSchedule::linear(10, 1e-4, 0.1).unwrap();
        assert!(s.forward_diffuse(0.0, 0, 0.0).is_err());
        assert!(s.forward_diffuse(0.0, 11, 0.0).is_err());
        assert!(s.reverse_step(0.0, 0.0, 1, 0.3).is_err());
    }

    #[test]
    fn variance_preserving_and_monotone() {
        let s = NoiseSchedule::linear(140, 1e-4, 0.1).unwrap();
        for m in 1..=140 {
            let sum = s.alpha_bar(m).powi(2) + s.beta_bar(m).powi(2);
            assert!((sum - 1.0).abs() <= 1e-12, "m={m}: {sum}");
            assert!(s.alpha_bar(m) < s.alpha_bar(m - 1));
            assert!(s.beta_bar(m) > s.beta_bar(m - 1));
        }
    }

    #[test]
    fn two_step_forward_example() {
        // alpha_bar_2 = sqrt(0.99 * 0.96), beta_bar_2 = sqrt(1 - 0.99 * 0.96)
        let s = NoiseSchedule::from_betas(&[0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(2) - 0.974885).abs() < 1e-6);
        assert!((s.beta_bar(2) - 0.222711).abs() < 1e-6);
        assert!((s.forward_diffuse(1.0, 2, 1.0).unwrap() - 1.197596).abs() < 1e-6);
        assert_eq!(s.forward_diffuse(2.0, 2, 0.0).unwrap(), s.alpha_bar(2) * 2.0);
        assert_eq!(s.forward_diffuse(0.0, 2, 0.7).unwrap(), s.beta_bar(2) * 0.7);
    }

    #[test]
    fn degenerate_posterior_at_first_step() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.1).unwrap();
        assert_eq!(s.posterior_params(0.3, 1.7, 1).unwrap(), (1.7, 0.0));
        let (mean, _) = s.posterior_params(0.0, 0.0, 5).unwrap();
        assert_eq!(mean, 0.0);
    }

    #[test]
    fn first_reverse_step_inverts_forward_exactly() {
        let s = NoiseSchedule::linear(10, 0.05, 0.3).unwrap();
        let (x0, eps) = (0.83, -1.2);
        let x1 = s.forward_diffuse(x0, 1, eps).unwrap();
        let back = s.reverse_step(x1, eps, 1, 0.0).unwrap();
        assert!((back - x0).abs() < 1e-14);
    }

    #[test]
    fn reverse_step_is_linear_in_z() {
        let s = NoiseSchedule::linear(20, 1e-4, 0.1).unwrap();
        for m in 2..=20 {
            let a = s.reverse_step(0.4, 0.1, m, 0.0).unwrap();
            let b = s.reverse_step(0.4, 0.1, m, 1.0).unwrap();
            assert!(((b - a) - s.posterior_std(m)).abs() < 1e-15);
        }
    }

    #[test]
    fn marginal_matches_forward_statistics() {
        let s = NoiseSchedule::linear(140, 1e-4, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        for &m in &[1usize, 35, 90, 140] {
            let x0 = 0.7;
            let draws: Vec<f64> = (0..n)
                .map(|_| s.forward_diffuse(x0, m, StandardNormal.sample(&mut rng)).unwrap())
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let target_var = s.beta_bar(m).powi(2);
            let se_mean = (target_var / n as f64).sqrt();
            assert!((mean - s.alpha_bar(m) * x0).abs() <= 4.0 * se_mean + 1e-12, "m={m}");
            let se_var = target_var * (2.0 / (n - 1) as f64).sqrt();
            assert!((var - target_var).abs() <= 4.0 * se_var + 1e-15, "m={m}");
        }
    }

    #[test]
    fn chained_single_steps_follow_the_marginal() {
        // iterate one-step transitions and compare with the closed-form marginal
        let s = NoiseSchedule::linear(60, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let x0 = -0.4;
        let m_end = 45;
        let mut finals = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = x0;
            for m in 1..=m_end {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = s.alpha(m) * x + s.beta(m) * e;
            }
            finals.push(x);
        }
        let mean = finals.iter().sum::<f64>() / n as f64;
        let var = finals.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let tv = s.beta_bar(m_end).powi(2);
        assert!((mean - s.alpha_bar(m_end) * x0).abs() < 4.0 * (tv / n as f64).sqrt());
        assert!((var - tv).abs() < 4.0 * tv * (2.0 / n as f64).sqrt());
    }
}
