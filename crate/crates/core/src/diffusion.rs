//! Noise schedule, closed-form forward corruption, the ancestral reverse
//! step, and the target-masked noise-prediction loss.
//!
//! Steps are 1-based: `t` ranges over `1..=T`. `alpha_t = 1 - beta_t` and
//! `alpha_bar_t` is the running product of `alpha`.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Quadratic schedule: `sqrt(beta)` linear from `sqrt(beta_1)` to `sqrt(beta_T)`.
pub fn quadratic_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_1 && beta_1 < beta_t && beta_t < 1.0) {
        return Err(Error::Schedule(format!("require 0 < beta_1 < beta_T < 1, got {beta_1}, {beta_t}")));
    }
    let (lo, hi) = (beta_1.sqrt(), beta_t.sqrt());
    let mut beta: Vec<f64> = (0..steps)
        .map(|i| {
            let s = lo + i as f64 / (steps - 1) as f64 * (hi - lo);
            s * s
        })
        .collect();
    beta[0] = beta_1;
    beta[steps - 1] = beta_t;
    Ok(DiffusionSchedule::from_betas(beta))
}

impl DiffusionSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self { beta, alpha, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let i = self.check(t)?;
        assert_eq!(x0.len(), eps.len());
        let (s, n) = (self.alpha_bar[i].sqrt(), (1.0 - self.alpha_bar[i]).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect())
    }

    /// Posterior mean `(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`.
    pub fn reverse_mean(&self, x_t: &[f64], eps_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        let i = self.check(t)?;
        assert_eq!(x_t.len(), eps_hat.len());
        let coef = self.beta[i] / (1.0 - self.alpha_bar[i]).sqrt();
        let inv = 1.0 / self.alpha[i].sqrt();
        Ok(x_t.iter().zip(eps_hat).map(|(x, e)| inv * (x - coef * e)).collect())
    }

    /// One ancestral step `x_{t-1} = mean + sqrt(beta_t) z`. The noise is
    /// ignored at `t = 1`.
    pub fn reverse_step(&self, x_t: &[f64], eps_hat: &[f64], t: usize, z: &[f64]) -> Result<Vec<f64>> {
        let mut mean = self.reverse_mean(x_t, eps_hat, t)?;
        if t > 1 {
            assert_eq!(z.len(), mean.len());
            let sigma = self.beta[t - 1].sqrt();
            mean.iter_mut().zip(z).for_each(|(m, z)| *m += sigma * z);
        }
        Ok(mean)
    }
}

/// Mean squared error over entries where `targets` is set.
pub fn masked_mse(eps: &[f64], eps_hat: &[f64], targets: &[bool]) -> Result<f64> {
    assert_eq!(eps.len(), eps_hat.len());
    assert_eq!(eps.len(), targets.len());
    let (sum, count) = eps
        .iter()
        .zip(eps_hat)
        .zip(targets)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), ((a, b), _)| (s + (a - b) * (a - b), c + 1));
    if count == 0 {
        return Err(Error::EmptyTargets);
    }
    Ok(sum / count as f64)
}

/// Differentiable [`masked_mse`] on a tape.
pub fn masked_loss(tape: &mut Tape, eps: Var, eps_hat: Var, targets: &[bool]) -> Result<Var> {
    if !targets.iter().any(|&m| m) {
        return Err(Error::EmptyTargets);
    }
    let diff = tape.sub(eps, eps_hat)?;
    let sel = tape.masked_select(diff, targets)?;
    let sq = tape.mul(sel, sel)?;
    Ok(tape.mean(sq)?)
}
