//! Uni- versus bidirectional Mamba blocks under identical data and seeds.

use serde::Serialize;

use timba::mamba::Direction;
use timba::Result;

use crate::config::BenchConfig;
use crate::experiment::{evaluate_case, DeskData, ModelCache};

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub direction: Direction,
    pub mae: f64,
    pub mse: f64,
    pub targets: usize,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Seeds where the bidirectional MAE is at most the unidirectional one.
    pub bi_wins: usize,
    pub seeds: usize,
}

impl AblationReport {
    pub fn mae(&self, seed: u64, direction: Direction) -> Option<f64> {
        self.rows.iter().find(|r| r.seed == seed && r.direction == direction).map(|r| r.mae)
    }
}

pub fn run_ablation(cfg: &BenchConfig, data: &DeskData, cache: &mut ModelCache) -> Result<AblationReport> {
    let case = data.test_case();
    let mut rows = Vec::new();
    let mut bi_wins = 0;
    for &seed in &cfg.study.ablation_seeds {
        for direction in [Direction::Uni, Direction::Bi] {
            let outcome = cache.get_or_train(cfg, data, direction, seed)?;
            let (report, _) = evaluate_case(&outcome.model, data, &case, cfg.impute.samples, seed)?;
            log::info!("ablation seed {seed} {direction:?}: MAE {:.4}", report.timba.mae);
            rows.push(AblationRow {
                seed,
                direction,
                mae: report.timba.mae,
                mse: report.timba.mse,
                targets: report.timba.count,
                best_epoch: outcome.best_epoch,
            });
        }
        let n = rows.len();
        if rows[n - 1].mae <= rows[n - 2].mae {
            bi_wins += 1;
        }
    }
    Ok(AblationReport { rows, bi_wins, seeds: cfg.study.ablation_seeds.len() })
}
