//! Denoising training: random windows, a mask strategy to pick targets,
//! uniform diffusion steps, and the target-masked noise loss.

use std::ops::Range;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{masked_loss, masked_mse, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::masking::{Mask, MaskPair, MaskStrategy};
use crate::model::{ConditioningBundle, Timba};
use crate::nn::Ctx;
use crate::tape::Tape;
use crate::tensor::NdArray;

use super::data::Grid;
use super::interp::linear_interpolate;
use super::optim::{Adam, AdamConfig, LrSchedule};

/// Samples per tape. Batches are split into chunks of this size whose
/// gradients are summed in a fixed order, so results do not depend on the
/// number of worker threads.
pub const SAMPLES_PER_TAPE: usize = 4;

/// Window draws attempted before giving up on finding any target entry.
const MAX_WINDOW_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Random-offset training windows drawn per epoch.
    pub windows_per_epoch: usize,
    pub learning_rate: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Seed for validation masks, steps, and noise; independent of `seed`.
    pub validation_seed: u64,
    /// Draws per validation window.
    pub validation_repeats: usize,
    pub strategy: MaskStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            windows_per_epoch: 2000,
            learning_rate: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
            validation_seed: 0x5e_ed0f_7a11,
            validation_repeats: 4,
            strategy: MaskStrategy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.windows_per_epoch == 0 || self.validation_repeats == 0 {
            return Err(Error::Config("batch_size, windows_per_epoch and validation_repeats must be positive".into()));
        }
        self.learning_rate.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.windows_per_epoch.div_ceil(self.batch_size)
    }
}

/// Normalized series and the ranges training draws from.
#[derive(Clone, Debug)]
pub struct TrainingSet<'a> {
    pub values: &'a Grid,
    /// Entries available to training (the dataset's observed mask).
    pub observed: &'a Mask,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub a_hat: &'a NdArray,
    /// Missing-pattern windows for the historical strategies.
    pub pool: &'a [Mask],
}

/// One window with its targets, diffusion step, and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x0: Vec<f64>,
    pub target: Vec<bool>,
    pub cond: Vec<bool>,
    pub interpolated: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

impl Sample {
    /// Entries outside `pair.observed` are zeroed in `x0`, so values the
    /// dataset marks missing never reach the model.
    pub fn new(window: &Grid, pair: &MaskPair, t: usize, eps: Vec<f64>) -> Self {
        let cond = pair.conditioning();
        let interpolated = linear_interpolate(window, &cond).values.values().to_vec();
        let x0 = window.values().iter().zip(pair.observed.bits()).map(|(&v, &o)| if o { v } else { 0.0 }).collect();
        Self {
            x0,
            target: pair.target.bits().to_vec(),
            cond: cond.bits().to_vec(),
            interpolated,
            t,
            eps,
        }
    }

    pub fn num_targets(&self) -> usize {
        self.target.iter().filter(|&&m| m).count()
    }
}

pub fn standard_normal(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws a window from `range` and a target mask from `strategy`, redrawing
/// windows whose observed entries admit no targets.
pub fn draw_sample(
    set: &TrainingSet<'_>,
    range: Range<usize>,
    len: usize,
    strategy: MaskStrategy,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Sample> {
    if range.end < range.start + len {
        return Err(Error::Data(format!("range {range:?} is shorter than the window length {len}")));
    }
    for _ in 0..MAX_WINDOW_ATTEMPTS {
        let start = rng.random_range(range.start..=range.end - len);
        let observed = set.observed.window(start, len);
        if observed.is_empty() {
            continue;
        }
        let pair = match strategy.draw(&observed, set.pool, rng) {
            Ok(p) => p,
            Err(Error::ResampleExhausted(_)) => continue,
            Err(e) => return Err(e),
        };
        let window = set.values.window(start, len);
        let t = rng.random_range(1..=steps);
        let eps = standard_normal(window.values().len(), rng);
        return Ok(Sample::new(&window, &pair, t, eps));
    }
    Err(Error::ResampleExhausted(MAX_WINDOW_ATTEMPTS))
}

/// Model inputs for a stack of samples: noisy input, conditioning, noise, targets.
fn batch_inputs(
    samples: &[Sample],
    nodes: usize,
    len: usize,
    a_hat: &NdArray,
    schedule: &DiffusionSchedule,
) -> Result<(NdArray, ConditioningBundle, NdArray, Vec<bool>)> {
    let b = samples.len();
    let mut noisy = Vec::with_capacity(b * nodes * len);
    let mut interp = Vec::with_capacity(b * nodes * len);
    let mut cond = Vec::with_capacity(b * nodes * len);
    let mut eps = Vec::with_capacity(b * nodes * len);
    let mut targets = Vec::with_capacity(b * nodes * len);
    for s in samples {
        if s.x0.len() != nodes * len {
            return Err(Error::Data(format!("sample has {} entries, expected {}", s.x0.len(), nodes * len)));
        }
        noisy.extend(schedule.forward_noise(&s.x0, s.t, &s.eps)?);
        interp.extend_from_slice(&s.interpolated);
        cond.extend_from_slice(&s.cond);
        eps.extend_from_slice(&s.eps);
        targets.extend_from_slice(&s.target);
    }
    let shape = vec![b, nodes, len];
    let bundle = ConditioningBundle {
        interpolated: NdArray::new(shape.clone(), interp)?,
        cond_mask: cond,
        a_hat: a_hat.clone(),
        steps: samples.iter().map(|s| s.t).collect(),
    };
    Ok((NdArray::new(shape.clone(), noisy)?, bundle, NdArray::new(shape, eps)?, targets))
}

/// Loss over all target entries of `samples` and its parameter gradients.
/// Dropout streams are derived from `seed` per chunk.
pub fn loss_and_grads(model: &Timba, samples: &[Sample], a_hat: &NdArray, seed: u64) -> Result<(f64, Vec<NdArray>)> {
    let schedule = model.config.schedule()?;
    let total: usize = samples.iter().map(Sample::num_targets).sum();
    if total == 0 {
        return Err(Error::EmptyTargets);
    }
    let (n, l) = (model.config.nodes, model.config.seq_len);
    let parts = samples
        .par_chunks(SAMPLES_PER_TAPE)
        .enumerate()
        .map(|(ci, chunk)| -> Result<Option<(f64, Vec<NdArray>)>> {
            let count: usize = chunk.iter().map(Sample::num_targets).sum();
            if count == 0 {
                return Ok(None);
            }
            let (noisy, bundle, eps, targets) = batch_inputs(chunk, n, l, a_hat, &schedule)?;
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, &model.params, true, seed.wrapping_add(ci as u64));
            let eps_hat = model.epsilon_theta(&mut cx, &noisy, &bundle)?;
            let params = cx.param_vars().to_vec();
            let eps = tape.constant(eps);
            let loss = masked_loss(&mut tape, eps, eps_hat, &targets)?;
            let w = count as f64 / total as f64;
            let loss = tape.scale(loss, w)?;
            let grads = tape.backward(loss)?;
            Ok(Some((tape.value(loss).item(), grads.wrt_all(&params))))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut acc: Option<Vec<NdArray>> = None;
    for (l, g) in parts.into_iter().flatten() {
        loss += l;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (a, g) in a.iter_mut().zip(&g) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    Ok((loss, acc.expect("at least one chunk with targets")))
}

/// Evaluation-mode loss, pooled over all target entries.
pub fn evaluation_loss(model: &Timba, samples: &[Sample], a_hat: &NdArray) -> Result<f64> {
    let schedule = model.config.schedule()?;
    let (n, l) = (model.config.nodes, model.config.seq_len);
    let parts = samples
        .par_chunks(SAMPLES_PER_TAPE)
        .map(|chunk| -> Result<(f64, usize)> {
            let (noisy, bundle, eps, targets) = batch_inputs(chunk, n, l, a_hat, &schedule)?;
            let count = targets.iter().filter(|&&m| m).count();
            if count == 0 {
                return Ok((0.0, 0));
            }
            let eps_hat = model.predict(&noisy, &bundle)?;
            Ok((masked_mse(eps.data(), eps_hat.data(), &targets)? * count as f64, count))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sse, count) = parts.iter().fold((0.0, 0), |(s, c), (a, b)| (s + a, c + b));
    if count == 0 {
        return Err(Error::EmptyTargets);
    }
    Ok(sse / count as f64)
}

/// Parameters plus optimizer state.
pub struct Trainer {
    pub model: Timba,
    pub a_hat: NdArray,
    opt: Adam,
}

impl Trainer {
    pub fn new(model: Timba, a_hat: NdArray, adam: AdamConfig) -> Self {
        let opt = Adam::new(adam, model.params.values());
        Self { model, a_hat, opt }
    }

    /// One optimizer step on `samples`; returns the pre-step loss.
    pub fn step(&mut self, samples: &[Sample], lr: f64, seed: u64) -> Result<f64> {
        let (loss, grads) = loss_and_grads(&self.model, samples, &self.a_hat, seed)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Divergence { epoch: 0, step: self.opt.steps() as usize, loss });
        }
        self.opt.step(self.model.params.values_mut(), &grads, lr);
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (the last epoch's when
    /// there is no validation data).
    pub model: Timba,
    pub history: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
}

/// Fixed validation samples: non-overlapping windows of the validation
/// range, each drawn `repeats` times from `seed`.
pub fn validation_samples(set: &TrainingSet<'_>, model: &Timba, cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let l = model.config.seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.validation_seed);
    let mut out = Vec::new();
    let mut start = set.val.start;
    while start + l <= set.val.end {
        let observed = set.observed.window(start, l);
        let window = set.values.window(start, l);
        for _ in 0..cfg.validation_repeats {
            let pair = match cfg.strategy.draw(&observed, set.pool, &mut rng) {
                Ok(p) => p,
                Err(Error::ResampleExhausted(_)) => continue,
                Err(Error::Mask(_)) if observed.is_empty() => break,
                Err(e) => return Err(e),
            };
            let t = rng.random_range(1..=model.config.diffusion_steps);
            let eps = standard_normal(window.values().len(), &mut rng);
            out.push(Sample::new(&window, &pair, t, eps));
        }
        start += l;
    }
    Ok(out)
}

pub fn train(model: Timba, set: &TrainingSet<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let l = model.config.seq_len;
    if (set.values.nodes(), set.observed.nodes()) != (model.config.nodes, model.config.nodes) {
        return Err(Error::Config("training data node count differs from the model".into()));
    }
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { model, history: Vec::new(), best_epoch: None });
    }
    let steps = model.config.diffusion_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(model, set.a_hat.clone(), cfg.adam);
    let mut best: Option<(f64, usize, crate::nn::ParamStore)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.learning_rate.rate(epoch, cfg.epochs);
        let mut remaining = cfg.windows_per_epoch;
        let mut loss_sum = 0.0;
        let mut step = 0;
        while remaining > 0 {
            let b = remaining.min(cfg.batch_size);
            remaining -= b;
            let samples = (0..b)
                .map(|_| draw_sample(set, set.train.clone(), l, cfg.strategy, steps, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let seed = rng.random::<u64>();
            let loss = trainer.step(&samples, lr, seed).map_err(|e| match e {
                Error::Divergence { loss, .. } => Error::Divergence { epoch, step, loss },
                e => e,
            })?;
            loss_sum += loss;
            step += 1;
        }
        // regenerated from the validation seed every epoch
        let val = validation_samples(set, &trainer.model, cfg)?;
        let val_loss = if val.is_empty() { None } else { Some(evaluation_loss(&trainer.model, &val, set.a_hat)?) };
        let stats = EpochStats {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / step as f64,
            val_loss,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.0e}, train {:.5}, val {}, {:.1}s",
            stats.train_loss,
            val_loss.map_or("-".into(), |v| format!("{v:.5}")),
            stats.wall_time_s
        );
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, trainer.model.params.clone()));
            }
        }
        history.push(stats);
    }
    let mut model = trainer.model;
    let best_epoch = best.map(|(_, e, p)| {
        model.params = p;
        e
    });
    Ok(TrainOutcome { model, history, best_epoch })
}
