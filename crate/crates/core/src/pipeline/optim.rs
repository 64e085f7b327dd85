//! Adam and the piecewise-constant learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::NdArray;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[NdArray]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [NdArray], grads: &[NdArray], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gr = gr + weight_decay * *w;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gr;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gr * gr;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

/// Base rate, dropped to each entry of `rates` once the epoch fraction
/// reaches the matching milestone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<f64>,
    pub rates: Vec<f64>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base: 1e-3, milestones: vec![0.75, 0.9], rates: vec![1e-4, 1e-5] }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("learning-rate schedule: {m}")));
        if self.milestones.len() != self.rates.len() {
            return bad("milestones and rates differ in length");
        }
        if self.milestones.iter().any(|&m| !(m > 0.0 && m < 1.0)) || self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be increasing and inside (0, 1)");
        }
        let mut prev = self.base;
        if !(prev > 0.0) {
            return bad("base rate must be positive");
        }
        for &r in &self.rates {
            if !(r > 0.0 && r < prev) {
                return bad("rates must be positive and decreasing");
            }
            prev = r;
        }
        Ok(())
    }

    /// Rate for a 0-based `epoch` out of `epochs`.
    pub fn rate(&self, epoch: usize, epochs: usize) -> f64 {
        let frac = epoch as f64 / epochs.max(1) as f64;
        self.milestones.iter().zip(&self.rates).filter(|(&m, _)| frac >= m).map(|(_, &r)| r).next_back().unwrap_or(self.base)
    }
}
