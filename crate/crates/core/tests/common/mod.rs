#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use timba::graph::{build_adjacency, GraphSpec};
use timba::masking::Mask;
use timba::model::{ModelConfig, Timba};
use timba::pipeline::Grid;
use timba::NdArray;

pub fn tiny_config() -> ModelConfig {
    ModelConfig { channels: 4, layers: 1, heads: 2, virtual_nodes: 2, nodes: 3, seq_len: 6, diffusion_steps: 8, ..Default::default() }
}

pub fn tiny_model(seed: u64) -> Timba {
    Timba::new(tiny_config(), seed).unwrap()
}

pub fn graph(nodes: usize) -> GraphSpec {
    let coords: Vec<[f64; 2]> = (0..nodes).map(|i| [i as f64 * 0.3, (i % 2) as f64 * 0.2]).collect();
    build_adjacency(&coords, 0.5, 0.1).unwrap()
}

pub fn randn(shape: &[usize], seed: u64) -> NdArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

/// Smooth coupled sinusoids.
pub fn series(nodes: usize, steps: usize) -> Grid {
    let mut g = Grid::zeros(nodes, steps);
    for n in 0..nodes {
        for s in 0..steps {
            let t = s as f64;
            g.set(n, s, (t / 4.0 + n as f64 * 0.5).sin() + 0.3 * (t / 1.7).cos() + n as f64 * 0.1);
        }
    }
    g
}

/// Every `every`-th entry (in flat order) is missing.
pub fn holes(nodes: usize, steps: usize, every: usize) -> Mask {
    Mask::new(nodes, steps, (0..nodes * steps).map(|i| i % every != 0).collect()).unwrap()
}
