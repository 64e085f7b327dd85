//! Desk-scale experiment plumbing shared by the CLI and the study harnesses:
//! data preparation, training, and test-split evaluation against baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use std::path::Path;

use serde::Serialize;

use timba::graph::GraphSpec;
use timba::mamba::Direction;
use timba::masking::{failure_pool, point_targets, scenario_masks, Mask, Scenario};
use timba::model::Timba;
use timba::pipeline::{
    impute, impute_baseline, metrics, node_means, train, Baseline, Grid, ImputationResult, Metrics, Normalizer, Split,
    TrainOutcome, TrainingSet,
};
use timba::pipeline::data::{read_adjacency_csv, read_dataset_csv};
use timba::{Error, Result};

use crate::config::{BenchConfig, ScenarioKind};
use crate::synthetic::generate_synthetic;

/// Derives independent sub-seeds from the root seed.
pub fn sub_seed(root: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = root ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_MISSING: u64 = 1;
const TAG_POOL: u64 = 2;
const TAG_IMPUTE: u64 = 3;
const TAG_RATE: u64 = 4;

/// A dataset with its missingness, split, normalization, and graph.
#[derive(Clone, Debug)]
pub struct DeskData {
    pub ids: Vec<String>,
    /// Ground truth, valid where `known` is set.
    pub truth: Grid,
    /// Entries with a recorded value (everything, for synthetic data).
    pub known: Mask,
    /// Entries available to every method.
    pub observed: Mask,
    pub graph: GraphSpec,
    pub split: Split,
    pub normalizer: Normalizer,
    /// Normalized values, zero where unobserved.
    pub normalized: Grid,
    /// Missing-pattern windows for the historical strategies.
    pub pool: Vec<Mask>,
}

impl DeskData {
    /// Synthetic ground truth with the configured missingness applied.
    pub fn synthetic(cfg: &BenchConfig) -> Result<Self> {
        let mut spec = cfg.data.clone();
        spec.seed = sub_seed(cfg.seed, 0) ^ cfg.data.seed;
        let syn = generate_synthetic(&spec)?;
        let (n, steps) = (syn.truth.nodes(), syn.truth.steps());
        let scenario = match cfg.scenario.kind {
            ScenarioKind::Point => Scenario::Point { rate: cfg.scenario.missing_rate },
            ScenarioKind::Block => Scenario::Block {
                point_rate: cfg.scenario.missing_rate,
                block_prob: cfg.scenario.block_prob,
                min_len: cfg.scenario.block_min_len,
                max_len: cfg.scenario.block_max_len,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, TAG_MISSING));
        let masks = scenario_masks(&scenario, n, steps, &mut rng)?;
        Self::from_parts(cfg, syn.ids, syn.truth, Mask::full(n, steps, true), masks.observed, syn.graph)
    }

    /// A recorded dataset: its gaps stay unknown, and the configured
    /// scenario removes a further share of the recorded entries for scoring.
    pub fn from_csv(cfg: &BenchConfig, data: &Path, adjacency: &Path) -> Result<Self> {
        let (ids, values, known) = read_dataset_csv(data)?;
        let graph = GraphSpec::from_adjacency(read_adjacency_csv(adjacency)?, Vec::new())?;
        if graph.nodes() != values.nodes() {
            return Err(Error::Data(format!("{} nodes in the dataset, {} in the adjacency", values.nodes(), graph.nodes())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, TAG_MISSING));
        let removed = point_targets(&known, cfg.scenario.missing_rate, &mut rng);
        let observed = known.and_not(&removed);
        Self::from_parts(cfg, ids, values, known, observed, graph)
    }

    pub fn from_parts(
        cfg: &BenchConfig,
        ids: Vec<String>,
        truth: Grid,
        known: Mask,
        observed: Mask,
        graph: GraphSpec,
    ) -> Result<Self> {
        let (n, steps) = (truth.nodes(), truth.steps());
        let split = Split::fractions(steps, cfg.train.train_fraction, cfg.train.val_fraction);
        let normalizer = Normalizer::fit(&truth, &observed, split.train.clone());
        let mut normalized = normalizer.normalize(&truth);
        for node in 0..n {
            for s in 0..steps {
                if !observed.get(node, s) {
                    normalized.set(node, s, 0.0);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, TAG_POOL));
        let pool = failure_pool(n, cfg.model.seq_len, cfg.train.failure_pool, &cfg.train.failure_spec(), &mut rng);
        Ok(Self { ids, truth, known, observed, graph, split, normalizer, normalized, pool })
    }

    pub fn training_set(&self) -> TrainingSet<'_> {
        TrainingSet {
            values: &self.normalized,
            observed: &self.observed,
            train: self.split.train.clone(),
            val: self.split.val.clone(),
            a_hat: &self.graph.normalized,
            pool: &self.pool,
        }
    }

    /// Test split with the dataset's own missing entries as targets.
    pub fn test_case(&self) -> TestCase {
        let r = self.split.test.clone();
        let observed = self.observed.window(r.start, r.len());
        let targets = self.known.window(r.start, r.len()).and_not(&observed);
        TestCase { truth: self.truth.window(r.start, r.len()), targets, observed }
    }

    /// Test split with a fresh point-missing pattern at `rate` over the known entries.
    pub fn point_case(&self, rate: f64, seed: u64) -> TestCase {
        let r = self.split.test.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_RATE ^ rate.to_bits()));
        let known = self.known.window(r.start, r.len());
        let targets = point_targets(&known, rate, &mut rng);
        TestCase { truth: self.truth.window(r.start, r.len()), observed: known.and_not(&targets), targets }
    }

    pub fn train_means(&self) -> Vec<f64> {
        node_means(&self.truth, &self.observed, self.split.train.clone())
    }
}

/// Ground truth, what the imputer sees, and what gets scored.
#[derive(Clone, Debug)]
pub struct TestCase {
    pub truth: Grid,
    pub observed: Mask,
    pub targets: Mask,
}

impl TestCase {
    /// The series as an imputer receives it: unobserved entries zeroed.
    pub fn visible(&self) -> Grid {
        let mut g = self.truth.clone();
        for n in 0..g.nodes() {
            for s in 0..g.steps() {
                if !self.observed.get(n, s) {
                    g.set(n, s, 0.0);
                }
            }
        }
        g
    }
}

pub fn train_model(cfg: &BenchConfig, data: &DeskData, direction: Direction, seed: u64) -> Result<TrainOutcome> {
    let mut mc = cfg.model.to_model_config(data.truth.nodes())?;
    mc.direction = direction;
    let model = Timba::new(mc, sub_seed(seed, 10))?;
    let tc = cfg.train.to_train_config(sub_seed(seed, 11))?;
    train(model, &data.training_set(), &tc)
}

/// Trained models keyed by training seed and direction, so studies that
/// share a configuration train each variant once.
#[derive(Default)]
pub struct ModelCache {
    models: BTreeMap<(u64, bool), TrainOutcome>,
}

impl ModelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, direction: Direction, seed: u64, outcome: TrainOutcome) {
        self.models.insert((seed, direction == Direction::Bi), outcome);
    }

    pub fn get_or_train(&mut self, cfg: &BenchConfig, data: &DeskData, direction: Direction, seed: u64) -> Result<&TrainOutcome> {
        let key = (seed, direction == Direction::Bi);
        if let std::collections::btree_map::Entry::Vacant(slot) = self.models.entry(key) {
            log::info!("training {direction:?} seed {seed}");
            slot.insert(train_model(cfg, data, direction, seed)?);
        }
        Ok(&self.models[&key])
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub timba: Metrics,
    pub mean: Metrics,
    pub linear: Metrics,
    pub impute_wall_time_s: f64,
}

pub fn impute_case(model: &Timba, data: &DeskData, case: &TestCase, k: usize, seed: u64) -> Result<ImputationResult> {
    impute(model, &case.visible(), &case.observed, &data.normalizer, &data.graph.normalized, k, sub_seed(seed, TAG_IMPUTE))?
        .score(&case.truth, &case.targets)
}

pub fn baseline_case(data: &DeskData, case: &TestCase, kind: Baseline) -> Result<(Grid, Metrics)> {
    let x = impute_baseline(kind, &case.visible(), &case.observed, &data.train_means());
    let m = metrics(&x, &case.truth, &case.targets)?;
    Ok((x, m))
}

pub fn evaluate_case(model: &Timba, data: &DeskData, case: &TestCase, k: usize, seed: u64) -> Result<(CaseReport, ImputationResult)> {
    let res = impute_case(model, data, case, k, seed)?;
    let report = CaseReport {
        timba: res.metrics.expect("scored"),
        mean: baseline_case(data, case, Baseline::Mean)?.1,
        linear: baseline_case(data, case, Baseline::Linear)?.1,
        impute_wall_time_s: res.wall_time_s,
    };
    Ok((report, res))
}
