//! Central finite-difference checks of reverse-mode gradients.
//!
//! Each check builds a scalar `f(inputs)`, takes analytic gradients from one
//! backward sweep, and compares every input entry against
//! `(f(x + h) - f(x - h)) / 2h`. Relative error is
//! `|a - n| / max(|a|, |n|, FLOOR)`; the floor keeps entries whose true
//! gradient is essentially zero from dominating through rounding noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::masked_loss;
use crate::error::Result;
use crate::graph::{build_adjacency, Mpnn, SpatialAttention};
use crate::mamba::{Direction, MambaBlock, MambaSettings};
use crate::model::{ConditioningBundle, ModelConfig, Timba};
use crate::nn::{Ctx, ParamBuilder, ParamStore};
use crate::tape::{ScanMode, Tape, Var};
use crate::tensor::NdArray;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Below this magnitude the check is effectively absolute (`TOLERANCE * FLOOR`),
/// well above the ~1e-9 rounding noise of a central difference at `STEP`.
pub const FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Checks `f` with respect to every entry of every input.
pub fn check<F>(name: &str, inputs: &[NdArray], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[NdArray]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone())).collect();
        let y = f(&mut tape, &vars)?;
        Ok(tape.value(y).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let grads = tape.backward(y)?;
    let analytic = grads.wrt_all(&vars);

    let mut work = inputs.to_vec();
    let mut report = GradCheck { name: name.to_string(), max_rel_error: 0.0, worst: (0, 0), worst_values: (0.0, 0.0), checked: 0 };
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let x0 = work[i].data()[j];
            work[i].data_mut()[j] = x0 + STEP;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - STEP;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * STEP);
            let err = rel_error(analytic[i].data()[j], numeric);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.worst_values = (analytic[i].data()[j], numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray {
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

/// `sum(y * w)` for fixed random weights, so every output entry matters with
/// a distinct sensitivity.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(t.shape(y), &mut rng);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p)?)
}

/// Checks a block built into its own parameter store; `extra` inputs are
/// appended after the parameters.
fn check_block<F>(name: &str, store: &ParamStore, extra: &[NdArray], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    let np = store.len();
    let mut inputs = store.values().to_vec();
    inputs.extend_from_slice(extra);
    check(name, &inputs, |t, vars| {
        let mut cx = Ctx::with_vars(t, vars[..np].to_vec(), false, 0);
        let y = f(&mut cx, &vars[np..])?;
        project(cx.tape, y, 99)
    })
}

fn primitives(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    type Unary = fn(&mut Tape, Var) -> crate::tensor::Result<Var>;
    let mut out = Vec::new();
    let x = randn(&[3, 4], rng);
    let unary: [(&str, Unary); 8] = [
        ("sigmoid", |t, v| t.sigmoid(v)),
        ("silu", |t, v| t.silu(v)),
        ("softplus", |t, v| t.softplus(v)),
        ("tanh", |t, v| t.tanh(v)),
        ("exp", |t, v| t.exp(v)),
        ("softmax", |t, v| t.softmax(v)),
        ("transpose", |t, v| t.transpose(v)),
        ("scale", |t, v| t.scale(v, -1.7)),
    ];
    for (name, op) in unary {
        out.push(check(name, std::slice::from_ref(&x), |t, v| {
            let y = op(t, v[0])?;
            project(t, y, 1)
        })?);
    }
    let (a, b) = (randn(&[2, 3, 4], rng), randn(&[2, 3, 4], rng));
    out.push(check("add", &[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 2)
    })?);
    out.push(check("add_broadcast_suffix", &[a.clone(), randn(&[4], rng)], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 2)
    })?);
    out.push(check("add_broadcast_general", &[a.clone(), randn(&[2, 1, 4], rng)], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 2)
    })?);
    out.push(check("sub", &[a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, 3)
    })?);
    out.push(check("mul", &[a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 4)
    })?);
    out.push(check("matmul", &[randn(&[3, 4], rng), randn(&[4, 2], rng)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 5)
    })?);
    out.push(check("matmul_batched", &[randn(&[2, 3, 4], rng), randn(&[2, 4, 2], rng)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 5)
    })?);
    out.push(check("matmul_shared_right", &[randn(&[2, 3, 4], rng), randn(&[4, 2], rng)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 5)
    })?);
    out.push(check("matmul_shared_left", &[randn(&[3, 4], rng), randn(&[2, 4, 2], rng)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 5)
    })?);
    out.push(check("permute", std::slice::from_ref(&a), |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        project(t, y, 6)
    })?);
    out.push(check("reshape", std::slice::from_ref(&a), |t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        project(t, y, 7)
    })?);
    out.push(check("concat", &[a.clone(), randn(&[2, 3, 2], rng)], |t, v| {
        let y = t.concat(&[v[0], v[1]], 2)?;
        project(t, y, 8)
    })?);
    out.push(check("slice", std::slice::from_ref(&a), |t, v| {
        let y = t.slice(v[0], 1, 1, 2)?;
        project(t, y, 9)
    })?);
    out.push(check("flip", std::slice::from_ref(&a), |t, v| {
        let y = t.flip(v[0], 1)?;
        project(t, y, 10)
    })?);
    out.push(check("sum", std::slice::from_ref(&a), |t, v| {
        let y = t.exp(v[0])?;
        Ok(t.sum(y)?)
    })?);
    out.push(check("mean", std::slice::from_ref(&a), |t, v| {
        let y = t.exp(v[0])?;
        Ok(t.mean(y)?)
    })?);
    out.push(check("layer_norm", &[a.clone(), randn(&[4], rng), randn(&[4], rng)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        project(t, y, 11)
    })?);
    out.push(check("depthwise_conv1d", &[randn(&[2, 5, 3], rng), randn(&[3, 4], rng), randn(&[3], rng)], |t, v| {
        let y = t.depthwise_conv1d(v[0], v[1], v[2])?;
        project(t, y, 12)
    })?);
    out.push(check("dropout", std::slice::from_ref(&a), |t, v| {
        // same stream on every evaluation, so the mask is fixed
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let y = t.dropout(v[0], 0.3, true, &mut r)?;
        project(t, y, 13)
    })?);
    out.push(check("embedding_lookup", &[randn(&[5, 3], rng)], |t, v| {
        let y = t.embedding_lookup(v[0], &[4, 0, 4, 2])?;
        project(t, y, 14)
    })?);
    out.push(check("masked_select", std::slice::from_ref(&a), |t, v| {
        let mask: Vec<bool> = (0..24).map(|i| i % 3 != 1).collect();
        let y = t.masked_select(v[0], &mask)?;
        project(t, y, 15)
    })?);
    let (l, c, n) = (6, 3, 4);
    let u = randn(&[2, l, c], rng);
    let delta = randn(&[2, l, c], rng).map(|z| 0.05 + 0.1 * z.abs());
    let bb = randn(&[2, l, n], rng);
    let cc = randn(&[2, l, n], rng);
    let a_log = randn(&[c, n], rng).map(|z| 0.3 * z);
    let d = randn(&[c], rng);
    for (name, mode) in [("selective_scan", ScanMode::Sequential), ("selective_scan_parallel", ScanMode::Parallel(2))] {
        let inputs = [u.clone(), delta.clone(), bb.clone(), cc.clone(), a_log.clone(), d.clone()];
        out.push(check(name, &inputs, |t, v| {
            let y = t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], mode)?;
            project(t, y, 16)
        })?);
    }
    Ok(out)
}

fn tiny_settings() -> MambaSettings {
    MambaSettings { expansion: 2, conv_width: 3, state_dim: 4, dropout: 0.0 }
}

fn blocks(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let d = 4;
    for (name, dir, cond) in [("mamba_uni", Direction::Uni, 0), ("mamba_bi", Direction::Bi, 2)] {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(21);
        let block = MambaBlock::new(&mut ParamBuilder::new(&mut store, &mut prng), d, cond, &tiny_settings(), dir);
        let mut extra = vec![randn(&[2, 5, d], rng)];
        if cond > 0 {
            extra.push(randn(&[2, 5, cond], rng));
        }
        out.push(check_block(name, &store, &extra, |cx, x| block.forward(cx, x[0], x.get(1).copied()).map_err(Into::into))?);
    }
    let coords = [[0.0, 0.0], [0.5, 0.0], [0.0, 0.7]];
    let a_hat = build_adjacency(&coords, 1.0, 0.1)?.normalized;
    {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(22);
        let mpnn = Mpnn::new(&mut ParamBuilder::new(&mut store, &mut prng), d);
        let a = a_hat.clone();
        out.push(check_block("mpnn", &store, &[randn(&[1, 3, 2, d], rng)], move |cx, x| {
            let a = cx.tape.constant(a.clone());
            mpnn.forward(cx, x[0], a)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(23);
        let att = SpatialAttention::new(&mut ParamBuilder::new(&mut store, &mut prng), d, 2, 2)?;
        out.push(check_block("virtual_node_attention", &store, &[randn(&[1, 3, 2, d], rng)], |cx, x| {
            att.forward(cx, x[0])
        })?);
    }
    let cfg = ModelConfig {
        channels: d,
        layers: 1,
        heads: 2,
        virtual_nodes: 2,
        nodes: 3,
        seq_len: 4,
        diffusion_steps: 10,
        mamba: tiny_settings(),
        step_embedding_dim: 4,
        ..Default::default()
    };
    let model = Timba::new(cfg, 24)?;
    {
        let a = a_hat.clone();
        let (cfem, emb) = (model.cfem.clone(), model.node_embedding);
        out.push(check_block("cfem", &model.params, &[randn(&[1, 3, 4], rng)], move |cx, x| {
            let a = cx.tape.constant(a.clone());
            let e = cx.tape.embedding_lookup(cx.p(emb), &[0, 1, 2])?;
            let e = cx.tape.reshape(e, &[1, 3, 1, d])?;
            cfem.forward(cx, x[0], e, a)
        })?);
    }
    {
        let a = a_hat.clone();
        let nem = model.nems[0].clone();
        let extra = [randn(&[1, 3, 4, d], rng), randn(&[1, 3, 4, d], rng), randn(&[1, 1, 1, d], rng)];
        out.push(check_block("nem", &model.params, &extra, move |cx, x| {
            let a = cx.tape.constant(a.clone());
            let (next, skip) = nem.forward(cx, x[0], x[1], a, x[2])?;
            Ok(cx.tape.concat(&[next, skip], 3)?)
        })?);
    }
    Ok(out)
}

/// Masked noise loss of a 2-node, `L = 8`, `d = 4` model against every parameter.
fn end_to_end(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let cfg = ModelConfig {
        channels: 4,
        layers: 1,
        heads: 2,
        virtual_nodes: 2,
        nodes: 2,
        seq_len: 8,
        diffusion_steps: 10,
        ..Default::default()
    };
    let model = Timba::new(cfg, 31)?;
    let (n, l) = (2, 8);
    let a_hat = build_adjacency(&[[0.0, 0.0], [0.6, 0.0]], 1.0, 0.1)?.normalized;
    let noisy = randn(&[1, n, l], rng);
    let cond: Vec<bool> = (0..n * l).map(|i| i % 3 == 0).collect();
    let targets: Vec<bool> = cond.iter().map(|c| !c).collect();
    let bundle = ConditioningBundle { interpolated: randn(&[1, n, l], rng), cond_mask: cond, a_hat, steps: vec![7] };
    let eps = randn(&[1, n, l], rng);
    let np = model.params.len();
    check("end_to_end_loss", model.params.values(), |t, vars| {
        let mut cx = Ctx::with_vars(t, vars[..np].to_vec(), false, 0);
        let eps_hat = model.epsilon_theta(&mut cx, &noisy, &bundle)?;
        let e = cx.tape.constant(eps.clone());
        masked_loss(cx.tape, e, eps_hat, &targets)
    })
}

/// Every primitive, block, and the end-to-end loss.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = primitives(&mut rng)?;
    out.extend(blocks(&mut rng)?);
    out.push(end_to_end(&mut rng)?);
    Ok(out)
}
