//! Target-only error metrics and their JSON-lines records.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::Mask;

use super::data::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub count: usize,
}

/// MAE and MSE of `imputed` against `truth` over `targets` only.
pub fn metrics(imputed: &Grid, truth: &Grid, targets: &Mask) -> Result<Metrics> {
    if (imputed.nodes(), imputed.steps()) != (truth.nodes(), truth.steps())
        || (targets.nodes(), targets.steps()) != (truth.nodes(), truth.steps())
    {
        return Err(Error::Data("metrics inputs differ in shape".into()));
    }
    let (mut abs, mut sq, mut count) = (0.0, 0.0, 0usize);
    for ((a, b), &m) in imputed.values().iter().zip(truth.values()).zip(targets.bits()) {
        if m {
            let e = a - b;
            abs += e.abs();
            sq += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyTargets);
    }
    Ok(Metrics { mae: abs / count as f64, mse: sq / count as f64, count })
}

/// One evaluated run, emitted as a single JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
    pub targets: usize,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    pub fn new(scenario: impl Into<String>, method: impl Into<String>, seed: u64, m: Metrics, wall_time_s: f64) -> Self {
        Self { scenario: scenario.into(), method: method.into(), seed, mae: m.mae, mse: m.mse, targets: m.count, wall_time_s }
    }

    pub fn write_line(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}
