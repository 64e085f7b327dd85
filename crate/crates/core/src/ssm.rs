//! Diagonal state-space recurrences: bilinear discretization, the linear
//! scan in sequential and associative (chunked parallel) form, and the
//! input-dependent projections of a selective SSM.

use rayon::prelude::*;

use crate::nn::{Ctx, Linear, ParamBuilder, ParamId};
use crate::tape::{softplus, Var};
use crate::tensor::{NdArray, Result};

pub const DEFAULT_SCAN_CHUNK: usize = 64;

/// Bilinear (Tustin) discretization of one diagonal entry.
///
/// Returns `(a_bar, b_bar)` with `a_bar = (1 + Δa/2) / (1 - Δa/2)` and
/// `b_bar = Δb / (1 - Δa/2)`.
#[inline]
pub fn bilinear(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let q = 0.5 * delta * a;
    debug_assert!(q != 1.0, "singular bilinear step: delta * a = 2");
    let den = 1.0 - q;
    ((1.0 + q) / den, delta * b / den)
}

/// Elementwise [`bilinear`] over a diagonal `a` and input column `b`.
pub fn discretize_bilinear(a: &[f64], b: &[f64], delta: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&a, &b)| bilinear(a, b, delta)).unzip()
}

/// Per-step discretized quantities of one channel, stored `[L, n]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedSteps {
    pub len: usize,
    pub state_dim: usize,
    pub a_bar: Vec<f64>,
    /// `b_bar_t * x_t`, the input injection of each step.
    pub bx: Vec<f64>,
    pub c: Vec<f64>,
}

impl DiscretizedSteps {
    /// Discretizes a single channel: `a` is the continuous diagonal, and
    /// `delta`, `b`, `c`, `x` are the per-step step sizes, input
    /// columns, readouts, and inputs.
    pub fn from_continuous(a: &[f64], delta: &[f64], b: &[f64], c: &[f64], x: &[f64]) -> Self {
        let (len, n) = (delta.len(), a.len());
        assert_eq!(b.len(), len * n);
        assert_eq!(c.len(), len * n);
        assert_eq!(x.len(), len);
        let mut a_bar = Vec::with_capacity(len * n);
        let mut bx = Vec::with_capacity(len * n);
        for t in 0..len {
            for j in 0..n {
                let (ab, bb) = bilinear(a[j], b[t * n + j], delta[t]);
                a_bar.push(ab);
                bx.push(bb * x[t]);
            }
        }
        Self { len, state_dim: n, a_bar, bx, c: c.to_vec() }
    }
}

/// Composition of two affine maps `h -> a*h + b`, applying `first` then `second`.
#[inline]
pub fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// `h_t = a_bar_t * h_{t-1} + bx_t` from `h_0 = 0`; returns all states `[L, n]`.
pub fn scan_states_sequential(a_bar: &[f64], bx: &[f64], n: usize) -> Vec<f64> {
    let len = a_bar.len() / n;
    let mut h = vec![0.0; len * n];
    let mut prev = vec![0.0; n];
    for t in 0..len {
        for j in 0..n {
            let v = a_bar[t * n + j] * prev[j] + bx[t * n + j];
            h[t * n + j] = v;
            prev[j] = v;
        }
    }
    h
}

/// Same recurrence as [`scan_states_sequential`] evaluated as a two-level
/// associative scan: independent chunk-local scans, a carry pass over chunk
/// aggregates, then a parallel fix-up. Deterministic for a fixed `chunk`.
pub fn scan_states_parallel(a_bar: &[f64], bx: &[f64], n: usize, chunk: usize) -> Vec<f64> {
    assert!(chunk > 0);
    let len = a_bar.len() / n;
    if len == 0 {
        return Vec::new();
    }
    let span = chunk * n;
    // chunk-local prefix: (cumulative product of a_bar, local state) per step
    let mut prod = vec![0.0; len * n];
    let mut local = vec![0.0; len * n];
    prod.par_chunks_mut(span)
        .zip(local.par_chunks_mut(span))
        .enumerate()
        .for_each(|(ci, (p, h))| {
            let base = ci * span;
            let steps = p.len() / n;
            for j in 0..n {
                let mut acc = (1.0, 0.0);
                for s in 0..steps {
                    let i = base + s * n + j;
                    acc = combine(acc, (a_bar[i], bx[i]));
                    p[s * n + j] = acc.0;
                    h[s * n + j] = acc.1;
                }
            }
        });
    let chunks = len.div_ceil(chunk);
    let mut carry = vec![0.0; chunks * n];
    for ci in 1..chunks {
        let last = (ci * chunk - 1) * n;
        for j in 0..n {
            let (_, c) = combine((1.0, carry[(ci - 1) * n + j]), (prod[last + j], local[last + j]));
            carry[ci * n + j] = c;
        }
    }
    local
        .par_chunks_mut(span)
        .zip(prod.par_chunks(span))
        .enumerate()
        .for_each(|(ci, (h, p))| {
            if ci == 0 {
                return;
            }
            let c = &carry[ci * n..(ci + 1) * n];
            for (hv, pv) in h.chunks_mut(n).zip(p.chunks(n)) {
                for j in 0..n {
                    hv[j] += pv[j] * c[j];
                }
            }
        });
    local
}

fn readout(steps: &DiscretizedSteps, h: &[f64], x: &[f64], d: f64) -> Vec<f64> {
    let n = steps.state_dim;
    (0..steps.len)
        .map(|t| {
            let c = &steps.c[t * n..(t + 1) * n];
            let hs = &h[t * n..(t + 1) * n];
            c.iter().zip(hs).map(|(c, h)| c * h).sum::<f64>() + d * x[t]
        })
        .collect()
}

/// `y_t = <C_t, h_t> + D x_t` with states from the sequential recurrence.
pub fn scan_sequential(steps: &DiscretizedSteps, x: &[f64], d: f64) -> Vec<f64> {
    let h = scan_states_sequential(&steps.a_bar, &steps.bx, steps.state_dim);
    readout(steps, &h, x, d)
}

/// As [`scan_sequential`], with states from [`scan_states_parallel`].
pub fn scan_parallel(steps: &DiscretizedSteps, x: &[f64], d: f64, chunk: usize) -> Vec<f64> {
    let h = scan_states_parallel(&steps.a_bar, &steps.bx, steps.state_dim, chunk);
    readout(steps, &h, x, d)
}

/// Learnable quantities of a selective SSM over `channels` inner channels.
#[derive(Clone, Debug)]
pub struct SelectiveSsmParams {
    /// `log(-a)` of the continuous diagonal, `[C, n]`.
    pub a_log: ParamId,
    /// Skip gain, `[C]`.
    pub d: ParamId,
    pub w_b: Linear,
    pub w_c: Linear,
    /// Step-size projection; its bias is the learned offset inside softplus.
    pub w_delta: Linear,
    pub state_dim: usize,
    pub channels: usize,
}

/// Inverse of softplus, used to place the initial step sizes.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SelectiveSsmParams {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, state_dim: usize) -> Self {
        // negated diagonal spans 1..=n in every channel
        let a_log = NdArray::new(
            vec![channels, state_dim],
            (0..channels).flat_map(|_| (1..=state_dim).map(|j| (j as f64).ln())).collect(),
        )
        .expect("shape");
        let a_log = pb.tensor("a_log", a_log);
        let d = pb.ones("d", &[channels]);
        let w_b = Linear::new(&mut pb.sub("w_b"), channels, state_dim, false);
        let w_c = Linear::new(&mut pb.sub("w_c"), channels, state_dim, false);
        let mut w_delta = Linear::new(&mut pb.sub("w_delta"), channels, channels, true);
        // softplus(bias) log-uniform in [1e-3, 0.1]
        let (lo, hi) = (1e-3f64.ln(), 0.1f64.ln());
        let bias: Vec<f64> = (0..channels)
            .map(|_| {
                let u: f64 = rand::Rng::random(pb.rng());
                softplus_inv((lo + u * (hi - lo)).exp())
            })
            .collect();
        let id = pb.tensor("w_delta_bias", NdArray::from_vec(bias));
        w_delta.b = Some(id);
        Self { a_log, d, w_b, w_c, w_delta, state_dim, channels }
    }

    /// `Δ = softplus(bias + x W_Δ)`, `B = x W_B`, `C = x W_C` per step.
    pub fn selective_projections(&self, cx: &mut Ctx<'_>, x: Var) -> Result<(Var, Var, Var)> {
        let pre = self.w_delta.forward(cx, x)?;
        let delta = cx.tape.softplus(pre)?;
        let b = self.w_b.forward(cx, x)?;
        let c = self.w_c.forward(cx, x)?;
        Ok((delta, b, c))
    }

    /// Full S6 layer on `x: [.., L, C]`.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (delta, b, c) = self.selective_projections(cx, x)?;
        let mode = cx.scan;
        cx.tape
            .selective_scan(x, delta, b, c, cx.p(self.a_log), cx.p(self.d), mode)
    }
}

/// Scalar step size a projection produces, for checks against the tape path.
pub fn step_size(bias: f64, w: &[f64], x: &[f64]) -> f64 {
    softplus(bias + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
}

/// Outcome of [`scan_equivalence`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScanCheck {
    pub instances: usize,
    pub max_dev: f64,
    /// `(len, chunk)` of the worst instance.
    pub worst: (usize, usize),
}

/// Random single-channel instances, each scanned sequentially and in
/// parallel with a random chunk size; reports the largest output deviation.
/// Instances cycle through `lens`.
pub fn scan_equivalence(seed: u64, instances: usize, state_dim: usize, lens: &[usize]) -> ScanCheck {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = ScanCheck { instances, max_dev: 0.0, worst: (0, 0) };
    for i in 0..instances {
        let len = lens[i % lens.len()];
        let mut normal = |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let (b, c, x) = (normal(len * state_dim), normal(len * state_dim), normal(len));
        let a: Vec<f64> = (0..state_dim).map(|j| -(j as f64 + 1.0)).collect();
        let delta: Vec<f64> = (0..len).map(|_| rng.random_range(1e-3..0.1)).collect();
        let d = rng.random_range(-1.0..1.0);
        let chunk = rng.random_range(1..=len);
        let steps = DiscretizedSteps::from_continuous(&a, &delta, &b, &c, &x);
        let seq = scan_sequential(&steps, &x, d);
        let par = scan_parallel(&steps, &x, d, chunk);
        let dev = seq.iter().zip(&par).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        if dev > out.max_dev {
            out.max_dev = dev;
            out.worst = (len, chunk);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilinear_collapses_at_zero_a() {
        assert_eq!(bilinear(0.0, 1.0, 0.1), (1.0, 0.1));
    }

    #[test]
    fn bilinear_scalar_case() {
        let (a, b) = bilinear(-1.0, 1.0, 0.1);
        assert!((a - 0.95 / 1.05).abs() < 1e-15);
        assert!((b - 0.1 / 1.05).abs() < 1e-15);
    }

    #[test]
    fn bilinear_small_step_limit() {
        let (a, b) = discretize_bilinear(&[-3.0, -0.5], &[2.0, 1.0], 1e-12);
        assert!(a.iter().all(|v| (v - 1.0).abs() < 1e-11));
        assert!(b.iter().all(|v| v.abs() < 1e-11));
    }

    #[test]
    fn bilinear_is_stable_for_negative_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let a = -rng.random_range(1e-3..100.0);
            let delta = rng.random_range(1e-4..10.0);
            let (ab, _) = bilinear(a, 1.0, delta);
            assert!(ab.abs() < 1.0, "a={a} delta={delta} a_bar={ab}");
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let steps = DiscretizedSteps::from_continuous(&[-1.0, -2.0], &[0.1; 5], &[1.0; 10], &[1.0; 10], &[0.0; 5]);
        assert!(scan_sequential(&steps, &[0.0; 5], 1.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_step_hand_recurrence() {
        let steps = DiscretizedSteps { len: 2, state_dim: 1, a_bar: vec![0.5, 0.5], bx: vec![1.0, 1.0], c: vec![1.0, 1.0] };
        assert_eq!(scan_sequential(&steps, &[1.0, 1.0], 0.0), vec![1.0, 1.5]);
        assert_eq!(scan_parallel(&steps, &[1.0, 1.0], 0.0, 1), vec![1.0, 1.5]);
    }

    #[test]
    fn single_step_parallel_is_bitwise_sequential() {
        let steps = DiscretizedSteps { len: 1, state_dim: 3, a_bar: vec![0.3, -0.2, 0.9], bx: vec![0.7, 1.1, -0.4], c: vec![0.5, 0.25, 2.0] };
        assert_eq!(scan_sequential(&steps, &[0.3], 0.7), scan_parallel(&steps, &[0.3], 0.7, 64));
    }

    #[test]
    fn unit_decay_is_prefix_sum() {
        let l = 100;
        let h = scan_states_parallel(&vec![1.0; l], &vec![1.0; l], 1, 7);
        for (t, v) in h.iter().enumerate() {
            assert_eq!(*v, (t + 1) as f64);
        }
    }

    #[test]
    fn combine_is_associative() {
        let (x, y, z) = ((0.5, 1.0), (0.25, -2.0), (0.75, 3.0));
        let l = combine(combine(x, y), z);
        let r = combine(x, combine(y, z));
        assert!((l.0 - r.0).abs() < 1e-15 && (l.1 - r.1).abs() < 1e-15);
    }

    #[test]
    fn impulse_response_decays() {
        let n = 16;
        let a: Vec<f64> = (1..=n).map(|j| -(j as f64)).collect();
        let l = 50;
        let mut x = vec![0.0; l];
        x[0] = 1.0;
        let steps = DiscretizedSteps::from_continuous(&a, &vec![0.05; l], &vec![1.0; l * n], &vec![1.0; l * n], &x);
        let h = scan_states_sequential(&steps.a_bar, &steps.bx, n);
        let norms: Vec<f64> = h.chunks(n).map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn init_step_sizes_within_range() {
        let mut store = crate::nn::ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = SelectiveSsmParams::new(&mut ParamBuilder::new(&mut store, &mut rng), 64, 16);
        for &b in store.get(p.w_delta.b.unwrap()).data() {
            let dt = softplus(b);
            assert!((1e-3 - 1e-12..=0.1 + 1e-12).contains(&dt), "{dt}");
        }
        let a = store.get(p.a_log);
        assert!((a.get(&[5, 15]).exp() - 16.0).abs() < 1e-12);
        assert!((a.get(&[5, 0]).exp() - 1.0).abs() < 1e-12);
    }
}
