//! Observed/target mask bookkeeping, training-target strategies, and
//! evaluation missing-data scenarios.
//!
//! All randomness comes from the caller's RNG; the same stream yields the
//! same masks.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resampling attempts before an empty target draw is reported.
pub const MAX_RESAMPLES: usize = 16;

/// Boolean `[nodes, steps]` grid, node-major.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Mask {
    nodes: usize,
    steps: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(nodes: usize, steps: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != nodes * steps {
            return Err(Error::Mask(format!("{} bits for a {nodes}x{steps} grid", bits.len())));
        }
        Ok(Self { nodes, steps, bits })
    }

    pub fn full(nodes: usize, steps: usize, value: bool) -> Self {
        Self { nodes, steps, bits: vec![value; nodes * steps] }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, node: usize, step: usize) -> bool {
        self.bits[node * self.steps + step]
    }

    pub fn set(&mut self, node: usize, step: usize, value: bool) {
        self.bits[node * self.steps + step] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn same_dims(&self, other: &Mask) -> bool {
        self.nodes == other.nodes && self.steps == other.steps
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert!(self.same_dims(other), "mask dims differ");
        Mask {
            nodes: self.nodes,
            steps: self.steps,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn not(&self) -> Mask {
        Mask { nodes: self.nodes, steps: self.steps, bits: self.bits.iter().map(|b| !b).collect() }
    }

    /// Columns `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Mask {
        let mut bits = Vec::with_capacity(self.nodes * len);
        for n in 0..self.nodes {
            bits.extend_from_slice(&self.bits[n * self.steps + start..n * self.steps + start + len]);
        }
        Mask { nodes: self.nodes, steps: len, bits }
    }
}

/// Observed entries split into conditioning entries and imputation targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    pub observed: Mask,
    pub target: Mask,
}

impl MaskPair {
    pub fn new(observed: Mask, target: Mask) -> Result<Self> {
        if !observed.same_dims(&target) {
            return Err(Error::Mask("observed and target masks differ in shape".into()));
        }
        if target.and_not(&observed).count() > 0 {
            return Err(Error::Mask("target entries outside the observed mask".into()));
        }
        Ok(Self { observed, target })
    }

    /// Observed entries the model may condition on.
    pub fn conditioning(&self) -> Mask {
        self.observed.and_not(&self.target)
    }
}

fn resample<R: Rng>(rng: &mut R, observed: &Mask, mut draw: impl FnMut(&mut R) -> Mask) -> Result<MaskPair> {
    if observed.is_empty() {
        return Err(Error::Mask("observed mask is empty".into()));
    }
    for _ in 0..MAX_RESAMPLES {
        let target = draw(rng).and(observed);
        if !target.is_empty() {
            return MaskPair::new(observed.clone(), target);
        }
    }
    Err(Error::ResampleExhausted(MAX_RESAMPLES))
}

/// Every observed entry becomes a target independently with probability `rate`.
pub fn point_targets(observed: &Mask, rate: f64, rng: &mut impl Rng) -> Mask {
    let bits = observed.bits.iter().map(|&o| o && rng.random::<f64>() < rate).collect();
    Mask { nodes: observed.nodes, steps: observed.steps, bits }
}

/// Point strategy: one rate `r ~ U[0, 1]` per draw.
pub fn mask_point(observed: &Mask, rng: &mut impl Rng) -> Result<MaskPair> {
    resample(rng, observed, |rng| {
        let r: f64 = rng.random();
        point_targets(observed, r, rng)
    })
}

/// Point strategy with a fixed rate.
pub fn mask_point_with_rate(observed: &Mask, rate: f64, rng: &mut impl Rng) -> Result<MaskPair> {
    resample(rng, observed, |rng| point_targets(observed, rate, rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    /// Per-node block probability is drawn from `U[0, max_block_prob]`.
    pub max_block_prob: f64,
    /// Additional independent point targets.
    pub point_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl BlockParams {
    /// Lengths `[ceil(L/2), L]`, block probability up to 15%, plus 5% points.
    pub fn for_window(len: usize) -> Self {
        Self { max_block_prob: 0.15, point_rate: 0.05, min_len: len.div_ceil(2), max_len: len }
    }
}

/// A contiguous run of targets on one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub node: usize,
    pub start: usize,
    pub len: usize,
}

/// One block-strategy draw before intersection with the observed mask.
pub fn block_targets(nodes: usize, steps: usize, p: &BlockParams, rng: &mut impl Rng) -> (Mask, Vec<Block>) {
    let mut mask = Mask::full(nodes, steps, false);
    let mut blocks = Vec::new();
    let max_len = p.max_len.min(steps);
    let min_len = p.min_len.min(max_len);
    for node in 0..nodes {
        let prob = rng.random::<f64>() * p.max_block_prob;
        if rng.random::<f64>() < prob && max_len > 0 {
            let len = rng.random_range(min_len..=max_len);
            let start = rng.random_range(0..=steps - len);
            for s in start..start + len {
                mask.set(node, s, true);
            }
            blocks.push(Block { node, start, len });
        }
    }
    for b in mask.bits.iter_mut() {
        if rng.random::<f64>() < p.point_rate {
            *b = true;
        }
    }
    (mask, blocks)
}

/// Block strategy on a window of length `observed.steps()`.
pub fn mask_block(observed: &Mask, rng: &mut impl Rng) -> Result<MaskPair> {
    if observed.steps < 2 {
        return Err(Error::Mask(format!("block strategy needs L >= 2, got {}", observed.steps)));
    }
    mask_block_with(observed, &BlockParams::for_window(observed.steps), rng)
}

pub fn mask_block_with(observed: &Mask, p: &BlockParams, rng: &mut impl Rng) -> Result<MaskPair> {
    resample(rng, observed, |rng| block_targets(observed.nodes, observed.steps, p, rng).0)
}

/// Historical strategy. Pool masks mark *missing* entries; one is drawn and
/// its missing pattern becomes the targets.
pub fn mask_historical(observed: &Mask, pool: &[Mask], rng: &mut impl Rng) -> Result<MaskPair> {
    if pool.is_empty() {
        return Err(Error::Mask("historical mask pool is empty".into()));
    }
    if pool.iter().any(|m| !m.same_dims(observed)) {
        return Err(Error::Mask("historical pool masks differ in shape from the window".into()));
    }
    resample(rng, observed, |rng| pool[rng.random_range(0..pool.len())].clone())
}

#[derive(Clone, Copy, Debug)]
pub enum Secondary<'a> {
    Block,
    Historical(&'a [Mask]),
}

/// Which strategy a hybrid draw used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HybridDraw {
    pub pair: MaskPair,
    pub used_point: bool,
}

/// Hybrid strategy: a fair coin picks point or the secondary strategy.
pub fn mask_hybrid(observed: &Mask, secondary: Secondary<'_>, rng: &mut impl Rng) -> Result<HybridDraw> {
    let heads = rng.random_bool(0.5);
    mask_hybrid_with_coin(observed, secondary, heads, rng)
}

pub fn mask_hybrid_with_coin(observed: &Mask, secondary: Secondary<'_>, heads: bool, rng: &mut impl Rng) -> Result<HybridDraw> {
    let pair = match (heads, secondary) {
        (true, _) => mask_point(observed, rng)?,
        (false, Secondary::Block) => mask_block(observed, rng)?,
        (false, Secondary::Historical(pool)) => mask_historical(observed, pool, rng)?,
    };
    Ok(HybridDraw { pair, used_point: heads })
}

/// Training-time target strategy selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Point,
    Block,
    Historical,
    #[default]
    HybridBlock,
    HybridHistorical,
}

impl MaskStrategy {
    pub fn draw(self, observed: &Mask, pool: &[Mask], rng: &mut impl Rng) -> Result<MaskPair> {
        match self {
            Self::Point => mask_point(observed, rng),
            Self::Block => mask_block(observed, rng),
            Self::Historical => mask_historical(observed, pool, rng),
            Self::HybridBlock => mask_hybrid(observed, Secondary::Block, rng).map(|d| d.pair),
            Self::HybridHistorical => mask_hybrid(observed, Secondary::Historical(pool), rng).map(|d| d.pair),
        }
    }
}

/// Evaluation-time missing-data scenario over a complete ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Point {
        rate: f64,
    },
    Block {
        point_rate: f64,
        /// Per-sensor, per-step probability that a block starts.
        block_prob: f64,
        min_len: usize,
        max_len: usize,
    },
    SimulatedFailure {
        #[serde(skip)]
        pool: Vec<Mask>,
    },
}

impl Scenario {
    pub fn point() -> Self {
        Self::Point { rate: 0.25 }
    }

    /// 5% points plus 1-4 hour blocks started with probability 0.15% per
    /// sensor and step; `steps_per_hour` converts hours to steps.
    pub fn block(steps_per_hour: usize) -> Self {
        Self::Block {
            point_rate: 0.05,
            block_prob: 0.0015,
            min_len: steps_per_hour.max(1),
            max_len: 4 * steps_per_hour.max(1),
        }
    }
}

/// Evaluation observed mask and the removed (scored) entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioMasks {
    pub observed: Mask,
    pub targets: Mask,
    pub blocks: Vec<Block>,
}

pub fn scenario_masks(scenario: &Scenario, nodes: usize, steps: usize, rng: &mut impl Rng) -> Result<ScenarioMasks> {
    let mut blocks = Vec::new();
    let removed = match scenario {
        Scenario::Point { rate } => point_targets(&Mask::full(nodes, steps, true), *rate, rng),
        Scenario::Block { point_rate, block_prob, min_len, max_len } => {
            let mut m = point_targets(&Mask::full(nodes, steps, true), *point_rate, rng);
            for node in 0..nodes {
                for start in 0..steps {
                    if rng.random::<f64>() < *block_prob {
                        let len = rng.random_range(*min_len..=*max_len).min(steps - start);
                        for s in start..start + len {
                            m.set(node, s, true);
                        }
                        blocks.push(Block { node, start, len });
                    }
                }
            }
            m
        }
        Scenario::SimulatedFailure { pool } => {
            if pool.is_empty() {
                return Err(Error::Mask("simulated-failure scenario needs a non-empty pool".into()));
            }
            let m = &pool[rng.random_range(0..pool.len())];
            if m.nodes != nodes || m.steps != steps {
                return Err(Error::Mask("failure pattern shape differs from the series".into()));
            }
            m.clone()
        }
    };
    Ok(ScenarioMasks { observed: removed.not(), targets: removed, blocks })
}

/// Bursty per-node outage simulator: a two-state Markov chain per node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureSpec {
    /// Probability per step that a working sensor fails.
    pub outage_rate: f64,
    /// Mean outage length in steps.
    pub mean_outage: f64,
}

impl Default for FailureSpec {
    fn default() -> Self {
        Self { outage_rate: 0.02, mean_outage: 6.0 }
    }
}

/// Missing-pattern mask (true = missing).
pub fn simulate_failures(nodes: usize, steps: usize, spec: &FailureSpec, rng: &mut impl Rng) -> Mask {
    let recover = 1.0 / spec.mean_outage.max(1.0);
    let mut m = Mask::full(nodes, steps, false);
    for node in 0..nodes {
        let mut down = false;
        for s in 0..steps {
            down = if down { rng.random::<f64>() >= recover } else { rng.random::<f64>() < spec.outage_rate };
            m.set(node, s, down);
        }
    }
    m
}

/// Pool of `count` simulated failure patterns, each `[nodes, steps]`.
pub fn failure_pool(nodes: usize, steps: usize, count: usize, spec: &FailureSpec, rng: &mut impl Rng) -> Vec<Mask> {
    (0..count).map(|_| simulate_failures(nodes, steps, spec, rng)).collect()
}

const MASK_MAGIC: &[u8; 8] = b"TIMBAMSK";
const MASK_VERSION: u32 = 1;

/// Writes masks as packed bits (LSB first) with the generating seed.
pub fn write_masks(mut w: impl Write, seed: u64, masks: &[Mask]) -> Result<()> {
    w.write_all(MASK_MAGIC)?;
    w.write_all(&MASK_VERSION.to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(masks.len() as u32).to_le_bytes())?;
    for m in masks {
        w.write_all(&(m.nodes as u32).to_le_bytes())?;
        w.write_all(&(m.steps as u32).to_le_bytes())?;
        let mut bytes = vec![0u8; m.bits.len().div_ceil(8)];
        for (i, &b) in m.bits.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_masks(mut r: impl Read) -> Result<(u64, Vec<Mask>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MASK_MAGIC {
        return Err(Error::Mask("not a mask file".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != MASK_VERSION {
        return Err(Error::Mask(format!("unsupported mask file version {version}")));
    }
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b4)?;
        let nodes = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let steps = u32::from_le_bytes(b4) as usize;
        let mut bytes = vec![0u8; (nodes * steps).div_ceil(8)];
        r.read_exact(&mut bytes)?;
        let bits = (0..nodes * steps).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        masks.push(Mask { nodes, steps, bits });
    }
    Ok((seed, masks))
}

pub fn save_masks(path: &Path, seed: u64, masks: &[Mask]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_masks(f, seed, masks)
}

pub fn load_masks(path: &Path) -> Result<(u64, Vec<Mask>)> {
    read_masks(std::io::BufReader::new(std::fs::File::open(path)?))
}
