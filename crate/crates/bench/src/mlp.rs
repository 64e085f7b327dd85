//! One-hidden-layer ReLU regressor for the downstream task, trained with
//! Adam on a half-MSE loss plus an L2 penalty, in the style of a stock
//! scikit-learn `MLPRegressor`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use timba::pipeline::{Adam, AdamConfig};
use timba::NdArray;

#[derive(Clone, Debug)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub max_batch: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { hidden: 100, epochs: 500, learning_rate: 1e-3, l2: 1e-4, max_batch: 200 }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    inputs: usize,
    hidden: usize,
    // [w1 (inputs x hidden), b1 (hidden), w2 (hidden), b2 (1)]
    params: Vec<NdArray>,
}

impl Mlp {
    /// Glorot-uniform weights, zero-mean uniform biases.
    pub fn new(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut init = |fan_in: usize, fan_out: usize, shape: &[usize]| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = shape.iter().product();
            NdArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
        };
        let params = vec![
            init(inputs, hidden, &[inputs, hidden]),
            init(inputs, hidden, &[hidden]),
            init(hidden, 1, &[hidden]),
            init(hidden, 1, &[1]),
        ];
        Self { inputs, hidden, params }
    }

    fn hidden_layer(&self, x: &[f64]) -> Vec<f64> {
        let (w1, b1) = (self.params[0].data(), self.params[1].data());
        let mut h = b1.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            let row = &w1[i * self.hidden..(i + 1) * self.hidden];
            for (hj, &w) in h.iter_mut().zip(row) {
                *hj += xi * w;
            }
        }
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        h
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        let h = self.hidden_layer(x);
        h.iter().zip(self.params[2].data()).map(|(a, b)| a * b).sum::<f64>() + self.params[3].data()[0]
    }

    pub fn predict(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.predict_one(x)).collect()
    }

    /// Loss and gradients over one minibatch.
    fn batch_grads(&self, xs: &[&[f64]], ys: &[f64], l2: f64) -> (f64, Vec<NdArray>) {
        let nb = xs.len() as f64;
        let mut grads: Vec<NdArray> = self.params.iter().map(|p| NdArray::zeros(p.shape())).collect();
        let mut loss = 0.0;
        let w2 = self.params[2].data().to_vec();
        for (x, &y) in xs.iter().zip(ys) {
            let h = self.hidden_layer(x);
            let out = h.iter().zip(&w2).map(|(a, b)| a * b).sum::<f64>() + self.params[3].data()[0];
            let r = out - y;
            loss += 0.5 * r * r / nb;
            let d = r / nb;
            grads[3].data_mut()[0] += d;
            for j in 0..self.hidden {
                grads[2].data_mut()[j] += d * h[j];
            }
            for j in 0..self.hidden {
                if h[j] <= 0.0 {
                    continue;
                }
                let dh = d * w2[j];
                grads[1].data_mut()[j] += dh;
                let g1 = grads[0].data_mut();
                for (i, &xi) in x.iter().enumerate() {
                    g1[i * self.hidden + j] += dh * xi;
                }
            }
        }
        // weights only, scaled by the batch size
        for k in [0, 2] {
            let p = self.params[k].data();
            loss += 0.5 * l2 * p.iter().map(|w| w * w).sum::<f64>() / nb;
            for (g, w) in grads[k].data_mut().iter_mut().zip(p) {
                *g += l2 * w / nb;
            }
        }
        (loss, grads)
    }

    /// Trains from a seeded initialization with per-epoch shuffling.
    /// Returns the per-epoch mean training loss.
    pub fn fit(xs: &[Vec<f64>], ys: &[f64], cfg: &MlpConfig, seed: u64) -> (Self, Vec<f64>) {
        assert_eq!(xs.len(), ys.len());
        assert!(!xs.is_empty(), "no training rows");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mlp = Self::new(xs[0].len(), cfg.hidden, &mut rng);
        let mut opt = Adam::new(AdamConfig::default(), &mlp.params);
        let batch = cfg.max_batch.min(xs.len()).max(1);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut curve = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch) {
                let bx: Vec<&[f64]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
                let by: Vec<f64> = chunk.iter().map(|&i| ys[i]).collect();
                let (loss, grads) = mlp.batch_grads(&bx, &by, cfg.l2);
                total += loss * chunk.len() as f64;
                opt.step(&mut mlp.params, &grads, cfg.learning_rate);
            }
            curve.push(total / xs.len() as f64);
        }
        (mlp, curve)
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }
}

/// Per-column affine map onto [0, 1], fitted on training rows.
#[derive(Clone, Debug)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub scale: Vec<f64>,
}

impl MinMax {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows[0].len();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for r in rows {
            for (j, &v) in r.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        // constant columns map to zero, as scikit-learn does
        let scale = min.iter().zip(&max).map(|(lo, hi)| if hi > lo { 1.0 / (hi - lo) } else { 1.0 }).collect();
        Self { min, scale }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.min).zip(&self.scale).map(|((v, lo), s)| (v - lo) * s).collect()
    }

    pub fn inverse(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.min).zip(&self.scale).map(|((v, lo), s)| v / s + lo).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(3, 5, &mut rng);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bx: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (_, grads) = mlp.batch_grads(&bx, &ys, 0.1);
        let h = 1e-6;
        for k in 0..4 {
            for i in 0..mlp.params[k].len() {
                let mut p = mlp.clone();
                p.params[k].data_mut()[i] += h;
                let up = p.batch_grads(&bx, &ys, 0.1).0;
                p.params[k].data_mut()[i] -= 2.0 * h;
                let down = p.batch_grads(&bx, &ys, 0.1).0;
                let num = (up - down) / (2.0 * h);
                assert!((num - grads[k].data()[i]).abs() < 1e-7, "param {k}[{i}]: {num} vs {}", grads[k].data()[i]);
            }
        }
    }

    #[test]
    fn fits_a_linear_target() {
        let xs: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 100.0, (i % 7) as f64 / 7.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.3 * x[0] + 0.5 * x[1] + 0.1).collect();
        let (mlp, curve) = Mlp::fit(&xs, &ys, &MlpConfig::default(), 0);
        assert!(curve.last().unwrap() < &(curve[0] / 10.0));
        let mse = mlp.predict(&xs).iter().zip(&ys).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / 100.0;
        assert!(mse < 1e-3, "{mse}");
    }

    #[test]
    fn minmax_round_trip_and_constant_column() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = MinMax::fit(&rows);
        assert_eq!(s.transform(&rows[1]), vec![1.0, 0.0]);
        assert_eq!(s.inverse(&s.transform(&[2.0, 5.0])), vec![2.0, 5.0]);
    }
}
