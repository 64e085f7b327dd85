//! Sampling imputations: `K` reverse diffusion chains per window, reduced
//! to a per-entry median.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::model::{ConditioningBundle, Timba};
use crate::tensor::NdArray;

use super::data::{Grid, Normalizer};
use super::interp::linear_interpolate;
use super::metrics::{metrics, Metrics};
use super::train::standard_normal;

/// Chains evaluated together in one forward pass.
const CHAINS_PER_PASS: usize = 5;

#[derive(Clone, Debug)]
pub struct ImputationResult {
    /// Per-entry median of the draws; observed entries are the inputs verbatim.
    pub imputed: Grid,
    /// The `K` individual draws, observed entries passed through likewise.
    pub samples: Vec<Grid>,
    pub metrics: Option<Metrics>,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl ImputationResult {
    pub fn score(mut self, truth: &Grid, targets: &Mask) -> Result<Self> {
        self.metrics = Some(metrics(&self.imputed, truth, targets)?);
        Ok(self)
    }
}

/// Median of a non-empty slice; the mean of the middle pair for even lengths.
pub fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Non-overlapping window starts covering `steps`; a trailing remainder is
/// covered by one last window aligned to the end.
pub fn window_starts(steps: usize, len: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..steps / len).map(|i| i * len).collect();
    if !steps.is_multiple_of(len) && steps >= len {
        starts.push(steps - len);
    }
    starts
}

/// RNG for chain `chain` of window `window`: its own stream of the root seed.
pub fn chain_rng(seed: u64, window: usize, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((window as u64) << 32) | chain as u64);
    rng
}

/// Runs `k` reverse chains on one normalized window; returns each chain's
/// final `x_0` (node-major, `N * L`).
pub fn sample_window(
    model: &Timba,
    window: &Grid,
    observed: &Mask,
    a_hat: &NdArray,
    k: usize,
    seed: u64,
    window_index: usize,
) -> Result<Vec<Vec<f64>>> {
    if k < 1 {
        return Err(Error::Config("the number of imputation draws must be at least 1".into()));
    }
    let (n, l) = (model.config.nodes, model.config.seq_len);
    if (window.nodes(), window.steps()) != (n, l) {
        return Err(Error::Data(format!("window is {}x{}, model expects {n}x{l}", window.nodes(), window.steps())));
    }
    let schedule = model.config.schedule()?;
    let interp = linear_interpolate(window, observed).values;
    let chains: Vec<usize> = (0..k).collect();
    let draws = chains
        .par_chunks(CHAINS_PER_PASS)
        .map(|ids| -> Result<Vec<Vec<f64>>> {
            let b = ids.len();
            let mut rngs: Vec<ChaCha8Rng> = ids.iter().map(|&c| chain_rng(seed, window_index, c)).collect();
            let mut x: Vec<Vec<f64>> = rngs.iter_mut().map(|r| standard_normal(n * l, r)).collect();
            let mut bundle = ConditioningBundle {
                interpolated: NdArray::new(vec![b, n, l], interp.values().repeat(b))?,
                cond_mask: observed.bits().repeat(b),
                a_hat: a_hat.clone(),
                steps: vec![0; b],
            };
            for t in (1..=schedule.steps()).rev() {
                bundle.steps.iter_mut().for_each(|s| *s = t);
                let noisy = NdArray::new(vec![b, n, l], x.concat())?;
                let eps = model.predict(&noisy, &bundle)?;
                for (i, (xi, rng)) in x.iter_mut().zip(&mut rngs).enumerate() {
                    let z = if t > 1 { standard_normal(n * l, rng) } else { Vec::new() };
                    *xi = schedule.reverse_step(xi, &eps.data()[i * n * l..(i + 1) * n * l], t, &z)?;
                }
            }
            Ok(x)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(draws.into_iter().flatten().collect())
}

/// Imputes every unobserved entry of `values` (raw scale) window by window.
pub fn impute(
    model: &Timba,
    values: &Grid,
    observed: &Mask,
    normalizer: &Normalizer,
    a_hat: &NdArray,
    k: usize,
    seed: u64,
) -> Result<ImputationResult> {
    let started = Instant::now();
    if k < 1 {
        return Err(Error::Config("the number of imputation draws must be at least 1".into()));
    }
    let (n, l) = (model.config.nodes, model.config.seq_len);
    if values.nodes() != n || (observed.nodes(), observed.steps()) != (values.nodes(), values.steps()) {
        return Err(Error::Data("series, mask, and model disagree on the number of nodes or steps".into()));
    }
    if values.steps() < l {
        return Err(Error::Data(format!("series of {} steps is shorter than the window length {l}", values.steps())));
    }
    let empty: Vec<usize> = (0..n).filter(|&i| (0..values.steps()).all(|s| !observed.get(i, s))).collect();
    if !empty.is_empty() {
        log::warn!("no observed values on node(s) {empty:?}; their conditioning is zero-filled");
    }
    let norm = normalizer.normalize(values);
    let steps = values.steps();
    let mut samples = vec![values.clone(); k];
    let mut covered = vec![false; steps];
    for (wi, &start) in window_starts(steps, l).iter().enumerate() {
        let obs = observed.window(start, l);
        let draws = sample_window(model, &norm.window(start, l), &obs, a_hat, k, seed, wi)?;
        for (sample, draw) in samples.iter_mut().zip(draws) {
            let draw = normalizer.denormalize(&Grid::new(n, l, draw)?);
            let fresh: Vec<bool> = (start..start + l).map(|s| !covered[s]).collect();
            sample.paste(start, &draw, |node, s| fresh[s - start] && !observed.get(node, s));
        }
        covered[start..start + l].iter_mut().for_each(|c| *c = true);
    }
    let mut imputed = values.clone();
    let mut buf = vec![0.0; k];
    for node in 0..n {
        for s in 0..steps {
            if !observed.get(node, s) {
                buf.iter_mut().zip(&samples).for_each(|(b, g)| *b = g.get(node, s));
                imputed.set(node, s, median(&mut buf));
            }
        }
    }
    Ok(ImputationResult { imputed, samples, metrics: None, seed, wall_time_s: started.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&mut [4.0]), 4.0);
        assert_eq!(median(&mut [9.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn windows_cover_series() {
        assert_eq!(window_starts(10, 5), vec![0, 5]);
        assert_eq!(window_starts(11, 5), vec![0, 5, 6]);
        assert_eq!(window_starts(4, 5), Vec::<usize>::new());
    }

    #[test]
    fn chain_streams_differ() {
        use rand::Rng;
        let a: u64 = chain_rng(1, 0, 0).random();
        let b: u64 = chain_rng(1, 0, 1).random();
        let c: u64 = chain_rng(1, 1, 0).random();
        assert!(a != b && a != c && b != c);
        assert_eq!(a, chain_rng(1, 0, 0).random::<u64>());
    }
}
