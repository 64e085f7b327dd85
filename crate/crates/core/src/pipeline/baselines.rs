//! Non-learned imputers: per-node historical mean and linear interpolation.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::masking::Mask;

use super::data::Grid;
use super::interp::linear_interpolate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Mean,
    Linear,
}

/// Mean of observed entries per node inside `range` (0 when none).
pub fn node_means(values: &Grid, observed: &Mask, range: Range<usize>) -> Vec<f64> {
    (0..values.nodes())
        .map(|n| {
            let (s, c) = range
                .clone()
                .filter(|&t| observed.get(n, t))
                .fold((0.0, 0usize), |(s, c), t| (s + values.get(n, t), c + 1));
            if c == 0 {
                0.0
            } else {
                s / c as f64
            }
        })
        .collect()
}

/// Fills every unobserved entry; observed entries are copied unchanged.
/// `means` is only consulted by [`Baseline::Mean`].
pub fn impute_baseline(kind: Baseline, values: &Grid, observed: &Mask, means: &[f64]) -> Grid {
    let fill = match kind {
        Baseline::Linear => linear_interpolate(values, observed).values,
        Baseline::Mean => {
            let mut g = Grid::zeros(values.nodes(), values.steps());
            for n in 0..values.nodes() {
                for s in 0..values.steps() {
                    g.set(n, s, means[n]);
                }
            }
            g
        }
    };
    let mut out = values.clone();
    for n in 0..values.nodes() {
        for s in 0..values.steps() {
            if !observed.get(n, s) {
                out.set(n, s, fill.get(n, s));
            }
        }
    }
    out
}
