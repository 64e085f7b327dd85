//! Synthetic graph-structured series: a bank of sinusoids whose phases
//! drift smoothly across a 2-D sensor layout, so nearby sensors move
//! together and spatial context helps imputation.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use timba::graph::{build_adjacency, GraphSpec};
use timba::pipeline::Grid;
use timba::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub steps: usize,
    /// Frequencies in cycles per step.
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Scales the coordinate-dependent phase shift, in `[0, 1]`.
    pub coupling: f64,
    /// Wave vector turning a coordinate into a phase (in cycles).
    pub wave: [f64; 2],
    /// Offset range; node offsets are a smooth function of position.
    pub offset_scale: f64,
    pub noise: f64,
    /// Explicit coordinates; drawn uniformly in the unit square when empty.
    pub coords: Vec<[f64; 2]>,
    pub length_scale: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            nodes: 8,
            steps: 1200,
            frequencies: vec![1.0 / 24.0, 1.0 / 8.0, 1.0 / 3.0],
            amplitudes: vec![1.0, 0.6, 0.4],
            coupling: 1.0,
            wave: [1.0, 0.5],
            offset_scale: 1.0,
            noise: 0.05,
            coords: Vec::new(),
            length_scale: 0.5,
            threshold: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.nodes < 2 {
            return bad(format!("need at least 2 nodes, got {}", self.nodes));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad(format!("coupling must lie in [0, 1], got {}", self.coupling));
        }
        if self.frequencies.len() != self.amplitudes.len() || self.frequencies.is_empty() {
            return bad("frequencies and amplitudes must be non-empty and of equal length".into());
        }
        if !self.coords.is_empty() && self.coords.len() != self.nodes {
            return bad(format!("{} coordinates for {} nodes", self.coords.len(), self.nodes));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub ids: Vec<String>,
    /// Complete ground truth.
    pub truth: Grid,
    pub graph: GraphSpec,
}

/// `x_i(t) = sum_f a_f sin(2 pi f t + phi_f + coupling * theta_i) + offset_i + noise`,
/// with `theta_i = 2 pi <wave, coord_i>`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coords: Vec<[f64; 2]> = if spec.coords.is_empty() {
        (0..spec.nodes).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect()
    } else {
        spec.coords.clone()
    };
    let phases: Vec<f64> = spec.frequencies.iter().map(|_| rng.random::<f64>() * TAU).collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut truth = Grid::zeros(spec.nodes, spec.steps);
    for (i, c) in coords.iter().enumerate() {
        let theta = TAU * (spec.wave[0] * c[0] + spec.wave[1] * c[1]);
        let offset = spec.offset_scale * (c[0] + c[1] - 1.0);
        for t in 0..spec.steps {
            let mut v = offset;
            for ((f, a), p) in spec.frequencies.iter().zip(&spec.amplitudes).zip(&phases) {
                v += a * (TAU * f * t as f64 + p + spec.coupling * theta).sin();
            }
            if spec.noise > 0.0 {
                v += noise.sample(&mut rng);
            }
            truth.set(i, t, v);
        }
    }
    let graph = build_adjacency(&coords, spec.length_scale, spec.threshold)?;
    let ids = (0..spec.nodes).map(|i| format!("s{i}")).collect();
    Ok(SyntheticData { ids, truth, graph })
}
