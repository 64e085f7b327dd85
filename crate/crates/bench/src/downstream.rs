//! Downstream node-value prediction: an MLP predicts one node at time `t`
//! from every other node at `t`, trained on differently imputed copies of
//! the held-out split. Only truly observed target rows are scored.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use timba::graph::GraphSpec;
use timba::pipeline::{Baseline, Grid};
use timba::{Error, Result};

use crate::config::{NodeChoice, StudySection};
use crate::experiment::{baseline_case, DeskData, TestCase};
use crate::mlp::{MinMax, Mlp, MlpConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputer {
    Oracle,
    Timba,
    Mean,
    Linear,
}

#[derive(Clone, Debug, Serialize)]
pub struct DownstreamRow {
    pub seed: u64,
    pub imputer: Imputer,
    pub mae: f64,
    pub mse: f64,
    pub train_rows: usize,
    pub test_rows: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DownstreamReport {
    pub node: usize,
    pub node_id: String,
    pub rows: Vec<DownstreamRow>,
    /// The ground-truth copy has the lowest MSE in every seed.
    pub oracle_best_every_seed: bool,
    /// Seeds where TIMBA's MSE is at most the mean baseline's.
    pub timba_le_mean_seeds: usize,
}

pub fn resolve_node(choice: NodeChoice, graph: &GraphSpec) -> Result<usize> {
    let deg = graph.degrees();
    let pick = |better: fn(f64, f64) -> bool| {
        (1..deg.len()).fold(0, |best, i| if better(deg[i], deg[best]) { i } else { best })
    };
    match choice {
        NodeChoice::MaxDegree => Ok(pick(|a, b| a > b)),
        NodeChoice::MinDegree => Ok(pick(|a, b| a < b)),
        NodeChoice::Index(i) if i < deg.len() => Ok(i),
        NodeChoice::Index(i) => Err(Error::Config(format!("downstream node {i} out of range (N = {})", deg.len()))),
    }
}

fn rows(x: &Grid, node: usize, steps: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let xs = steps.iter().map(|&t| (0..x.nodes()).filter(|&n| n != node).map(|n| x.get(n, t)).collect()).collect();
    let ys = steps.iter().map(|&t| x.get(node, t)).collect();
    (xs, ys)
}

/// Scores one imputed copy for one seed's row split.
pub fn score_imputer(
    imputed: &Grid,
    case: &TestCase,
    node: usize,
    train_steps: &[usize],
    test_steps: &[usize],
    mlp: &MlpConfig,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    let test_steps: Vec<usize> = test_steps.iter().copied().filter(|&t| case.observed.get(node, t)).collect();
    if test_steps.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let (xs, ys) = rows(imputed, node, train_steps);
    let fx = MinMax::fit(&xs);
    let fy = MinMax::fit(&ys.iter().map(|&y| vec![y]).collect::<Vec<_>>());
    let sx: Vec<Vec<f64>> = xs.iter().map(|r| fx.transform(r)).collect();
    let sy: Vec<f64> = ys.iter().map(|&y| fy.transform(&[y])[0]).collect();
    let (model, _) = Mlp::fit(&sx, &sy, mlp, seed);
    let (tx, _) = rows(imputed, node, &test_steps);
    let (mut abs, mut sq) = (0.0, 0.0);
    for (x, &t) in tx.iter().zip(&test_steps) {
        let pred = fy.inverse(&[model.predict_one(&fx.transform(x))])[0];
        let e = pred - case.truth.get(node, t);
        abs += e.abs();
        sq += e * e;
    }
    let n = test_steps.len() as f64;
    Ok((abs / n, sq / n, test_steps.len()))
}

pub fn run_downstream(
    study: &StudySection,
    data: &DeskData,
    case: &TestCase,
    timba: Option<&Grid>,
    node: usize,
) -> Result<DownstreamReport> {
    let mut copies = vec![(Imputer::Oracle, case.truth.clone())];
    if let Some(g) = timba {
        copies.push((Imputer::Timba, g.clone()));
    }
    copies.push((Imputer::Mean, baseline_case(data, case, Baseline::Mean)?.0));
    copies.push((Imputer::Linear, baseline_case(data, case, Baseline::Linear)?.0));
    let mlp = MlpConfig {
        hidden: study.mlp_hidden,
        epochs: study.mlp_epochs,
        learning_rate: study.mlp_learning_rate,
        l2: study.mlp_l2,
        ..MlpConfig::default()
    };
    let steps = case.truth.steps();
    let n_train = ((steps as f64) * study.mlp_train_fraction).round() as usize;
    let mut out = Vec::new();
    let (mut oracle_best, mut timba_le_mean) = (true, 0);
    for &seed in &study.downstream_seeds {
        let mut order: Vec<usize> = (0..steps).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (train_steps, test_steps) = order.split_at(n_train);
        let start = out.len();
        for (imputer, grid) in &copies {
            let (mae, mse, test_rows) = score_imputer(grid, case, node, train_steps, test_steps, &mlp, seed)?;
            log::info!("downstream seed {seed} {imputer:?}: MSE {mse:.4}");
            out.push(DownstreamRow { seed, imputer: *imputer, mae, mse, train_rows: train_steps.len(), test_rows });
        }
        let seed_rows = &out[start..];
        let oracle = seed_rows[0].mse;
        oracle_best &= seed_rows[1..].iter().all(|r| oracle < r.mse);
        let mse_of = |k: Imputer| seed_rows.iter().find(|r| r.imputer == k).map(|r| r.mse);
        if let (Some(t), Some(m)) = (mse_of(Imputer::Timba), mse_of(Imputer::Mean)) {
            timba_le_mean += usize::from(t <= m);
        }
    }
    Ok(DownstreamReport {
        node,
        node_id: data.ids[node].clone(),
        rows: out,
        oracle_best_every_seed: oracle_best,
        timba_le_mean_seeds: timba_le_mean,
    })
}
