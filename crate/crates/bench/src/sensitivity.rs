//! One trained model evaluated under point-missing masks of increasing rate.

use serde::Serialize;

use timba::model::Timba;
use timba::pipeline::Baseline;
use timba::{Error, Result};

use crate::experiment::{baseline_case, impute_case, DeskData};

#[derive(Clone, Debug, Serialize)]
pub struct RatePoint {
    pub rate: f64,
    pub mae: f64,
    pub mse: f64,
    pub targets: usize,
    pub mean_mae: f64,
    pub linear_mae: f64,
}

/// A step where the MAE went down as the missing rate went up.
#[derive(Clone, Debug, Serialize)]
pub struct Inversion {
    pub from_rate: f64,
    pub to_rate: f64,
    pub drop: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SensitivityReport {
    pub points: Vec<RatePoint>,
    pub inversions: Vec<Inversion>,
    pub mean_mae: f64,
    /// At most one inversion, smaller than 2% of the mean MAE.
    pub nondecreasing_within_tolerance: bool,
}

pub fn monotonicity(rates: &[f64], maes: &[f64]) -> (Vec<Inversion>, f64, bool) {
    let mean = maes.iter().sum::<f64>() / maes.len().max(1) as f64;
    let inversions: Vec<Inversion> = (1..maes.len())
        .filter(|&i| maes[i] < maes[i - 1])
        .map(|i| Inversion { from_rate: rates[i - 1], to_rate: rates[i], drop: maes[i - 1] - maes[i] })
        .collect();
    let ok = inversions.len() <= 1 && inversions.iter().all(|v| v.drop < 0.02 * mean);
    (inversions, mean, ok)
}

pub fn run_sensitivity(model: &Timba, data: &DeskData, rates: &[f64], k: usize, seed: u64) -> Result<SensitivityReport> {
    let mut points = Vec::with_capacity(rates.len());
    for &rate in rates {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("missing rate {rate} outside [0, 1)")));
        }
        let case = data.point_case(rate, seed);
        if case.targets.is_empty() {
            return Err(Error::EmptyTargets);
        }
        let res = impute_case(model, data, &case, k, seed)?;
        let m = res.metrics.expect("scored");
        log::info!("sensitivity rate {rate}: MAE {:.4}", m.mae);
        points.push(RatePoint {
            rate,
            mae: m.mae,
            mse: m.mse,
            targets: m.count,
            mean_mae: baseline_case(data, &case, Baseline::Mean)?.1.mae,
            linear_mae: baseline_case(data, &case, Baseline::Linear)?.1.mae,
        });
    }
    let maes: Vec<f64> = points.iter().map(|p| p.mae).collect();
    let (inversions, mean_mae, ok) = monotonicity(rates, &maes);
    Ok(SensitivityReport { points, inversions, mean_mae, nondecreasing_within_tolerance: ok })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerates_one_small_inversion() {
        let rates = [0.1, 0.2, 0.3, 0.4];
        assert!(monotonicity(&rates, &[1.0, 1.1, 1.2, 1.3]).2);
        assert!(monotonicity(&rates, &[1.0, 1.1, 1.09, 1.3]).2);
        assert!(!monotonicity(&rates, &[1.0, 1.1, 1.0, 1.3]).2);
        assert!(!monotonicity(&rates, &[1.0, 0.99, 1.2, 1.19]).2);
    }
}
