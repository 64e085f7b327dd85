//! Tape-based reverse-mode differentiation over [`NdArray`] values.
//!
//! Every primitive appends one node holding its forward value and enough
//! saved state to run its backward rule. Node ids are handed out in
//! record order, so inputs always precede outputs and the backward sweep is
//! a single reverse pass over the node list.

use rand::Rng;

use crate::ssm;
use crate::tensor::{mismatch, strides, NdArray, Result, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanMode {
    #[default]
    Sequential,
    /// Chunked associative scan; the value is the chunk length.
    Parallel(usize),
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Flip(Var, usize),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Tanh(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Embedding { table: Var, idx: Vec<usize> },
    MaskedSelect { x: Var, idx: Vec<usize> },
    Scan(Box<ScanSaved>),
}

struct ScanSaved {
    u: Var,
    delta: Var,
    b: Var,
    c: Var,
    a_log: Var,
    d: Var,
    /// Hidden states laid out `[outer, L, C, n]`.
    states: Vec<f64>,
}

struct Node {
    value: NdArray,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pool: Vec<Vec<f64>>,
}

/// Gradients of a scalar loss with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<NdArray> {
        self.grads[v.0]
            .as_ref()
            .map(|g| NdArray::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> NdArray {
        self.get(v).unwrap_or_else(|| NdArray::zeros(&self.shapes[v.0]))
    }

    pub fn wrt_all(&self, vars: &[Var]) -> Vec<NdArray> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

fn unary_shape_check(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(mismatch(op, &[a, b]));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// out[m,n] += a[m,k] * b[k,n]
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn mm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn mm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

struct MatMulDims {
    batch: Vec<usize>,
    groups: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch("matmul", &[a, b]));
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] || (!ab.is_empty() && !bb.is_empty() && ab != bb) {
        return Err(mismatch("matmul", &[a, b]));
    }
    let batch = if ab.is_empty() { bb.to_vec() } else { ab.to_vec() };
    Ok(MatMulDims {
        groups: batch.iter().product(),
        batch,
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        m: am[0],
        k: am[1],
        n: bm[1],
    })
}

/// Maps each flat index of `out_shape` to the flat index of a right-aligned
/// broadcast operand of shape `b_shape`.
fn broadcast_map(out_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let mut padded = vec![1usize; nd - b_shape.len()];
    padded.extend_from_slice(b_shape);
    let bs = strides(&padded);
    let eff: Vec<usize> = (0..nd).map(|i| if padded[i] == 1 { 0 } else { bs[i] }).collect();
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

enum Broadcast {
    Same,
    /// `b` repeats with period `b.len()` over the flat index of `a`.
    Suffix,
    General(Vec<usize>),
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if b.len() > a.len() {
        return Err(mismatch("add", &[a, b]));
    }
    let off = a.len() - b.len();
    for (i, &d) in b.iter().enumerate() {
        if d != 1 && d != a[off + i] {
            return Err(mismatch("add", &[a, b]));
        }
    }
    // suffix case: b (after dropping leading ones) equals a trailing block of a
    let first_real = b.iter().position(|&d| d != 1).unwrap_or(b.len());
    if b[first_real..] == a[off + first_real..] {
        return Ok(Broadcast::Suffix);
    }
    Ok(Broadcast::General(broadcast_map(a, b)))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all nodes, keeping their buffers on a free-list for the next step.
    pub fn reset(&mut self) {
        for node in self.nodes.drain(..) {
            let mut buf = node.value.into_data();
            buf.clear();
            self.pool.push(buf);
        }
    }

    fn buffer(&mut self, len: usize) -> Vec<f64> {
        let mut buf = self.pool.pop().unwrap_or_default();
        buf.clear();
        buf.resize(len, 0.0);
        buf
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: NdArray) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant by the backward pass.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: NdArray, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn map_unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut out = self.buffer(0);
        out.extend(self.nodes[x.0].value.data().iter().map(|&v| f(v)));
        self.push(name, NdArray::from_parts(shape, out), op, &[x])
    }

    /// Elementwise sum; `b` may broadcast against `a` (right-aligned, size-1 axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind(self.shape(a), self.shape(b))?;
        let shape = self.shape(a).to_vec();
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let data: Vec<f64> = match &kind {
            Broadcast::Same => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            Broadcast::Suffix => {
                let p = bv.len();
                av.iter().enumerate().map(|(i, x)| x + bv[i % p]).collect()
            }
            Broadcast::General(map) => av.iter().zip(map).map(|(x, &j)| x + bv[j]).collect(),
        };
        self.push("add", NdArray::from_parts(shape, data), Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        unary_shape_check("sub", self.shape(a), self.shape(b))?;
        let shape = self.shape(a).to_vec();
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        self.push("sub", NdArray::from_parts(shape, data), Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        unary_shape_check("mul", self.shape(a), self.shape(b))?;
        let shape = self.shape(a).to_vec();
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        self.push("mul", NdArray::from_parts(shape, data), Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    /// Batched matrix product over the last two axes. One operand may be a
    /// plain matrix shared across the other's batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = self.buffer(d.groups * d.m * d.n);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for g in 0..d.groups {
            let ao = if d.a_batched { g * sa } else { 0 };
            let bo = if d.b_batched { g * sb } else { 0 };
            mm_acc(&av[ao..ao + sa], &bv[bo..bo + sb], &mut out[g * so..(g + 1) * so], d.m, d.k, d.n);
        }
        let mut shape = d.batch;
        shape.extend([d.m, d.n]);
        self.push("matmul", NdArray::from_parts(shape, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.permute(axes)?;
        self.push("permute", value, Op::Permute(x, axes.to_vec()), &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(mismatch("transpose", &[self.shape(x)]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", &[&first]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || (0..s.len()).any(|i| i != axis && s[i] != first[i]) {
                let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
                return Err(mismatch("concat", &shapes));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.nodes[x.0].value.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", NdArray::from_parts(shape, data), Op::Concat(xs.to_vec(), axis), xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("[{start}, {}) along axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("slice", NdArray::from_parts(out_shape, data), Op::Slice { x, axis, start }, &[x])
    }

    /// Reverses the order of entries along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("flip", &[&shape]));
        }
        let data = flip_data(self.nodes[x.0].value.data(), &shape, axis);
        self.push("flip", NdArray::from_parts(shape, data), Op::Flip(x, axis), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push("sum", NdArray::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.nodes[x.0].value.data();
        if v.is_empty() {
            return Err(TensorError::InvalidArgument { op: "mean", msg: "empty input".into() });
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", NdArray::scalar(m), Op::Mean(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map_unary("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map_unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map_unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary("exp", x, f64::exp, Op::Exp(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| mismatch("softmax", &[&shape]))?;
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; src.len()];
        for (row, out) in src.chunks(c).zip(data.chunks_mut(c)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        self.push("softmax", NdArray::from_parts(shape, data), Op::Softmax(x), &[x])
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| mismatch("layer_norm", &[&shape]))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("layer_norm", &[&shape, self.shape(gamma), self.shape(beta)]));
        }
        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[r * c + j] = h;
                data[r * c + j] = g[j] * h + bt[j];
            }
        }
        self.push(
            "layer_norm",
            NdArray::from_parts(shape, data),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// Causal depthwise convolution along the second-to-last (time) axis of
    /// `x: [.., L, C]` with kernel `w: [C, W]` and bias `b: [C]`. Positions
    /// before the start of the sequence read as zero.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let nd = shape.len();
        let ws = self.shape(w).to_vec();
        if nd < 2 || ws.len() != 2 || ws[0] != shape[nd - 1] || self.shape(b) != [ws[0]] {
            return Err(mismatch("depthwise_conv1d", &[&shape, &ws, self.shape(b)]));
        }
        let (l, c, width) = (shape[nd - 2], shape[nd - 1], ws[1]);
        let outer = shape[..nd - 2].iter().product::<usize>();
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            let base = o * l * c;
            for t in 0..l {
                for ch in 0..c {
                    let mut acc = bv[ch];
                    for k in 0..width {
                        // tap k reads x[t - (W-1) + k]
                        let s = t as isize - (width - 1) as isize + k as isize;
                        if s >= 0 {
                            acc += wv[ch * width + k] * xv[base + s as usize * c + ch];
                        }
                    }
                    data[base + t * c + ch] = acc;
                }
            }
        }
        self.push("depthwise_conv1d", NdArray::from_parts(shape, data), Op::Conv1d { x, w, b }, &[x, w, b])
    }

    /// Inverted dropout. With `train == false` (or `p == 0`) this is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument { op: "dropout", msg: format!("p = {p} outside [0, 1)") });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let shape = self.shape(x).to_vec();
        let data = self.nodes[x.0].value.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push("dropout", NdArray::from_parts(shape, data), Op::Dropout { x, mask }, &[x])
    }

    /// Gathers rows of `table: [V, D]`, producing `[idx.len(), D]`.
    pub fn embedding_lookup(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || idx.iter().any(|&i| i >= ts[0]) {
            return Err(TensorError::InvalidArgument {
                op: "embedding_lookup",
                msg: format!("indices out of range for table {ts:?}"),
            });
        }
        let dim = ts[1];
        let tv = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        self.push(
            "embedding_lookup",
            NdArray::from_parts(vec![idx.len(), dim], data),
            Op::Embedding { table, idx: idx.to_vec() },
            &[table],
        )
    }

    /// Flat vector of the entries of `x` where `mask` is set.
    pub fn masked_select(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.nodes[x.0].value.len() {
            return Err(mismatch("masked_select", &[self.shape(x), &[mask.len()]]));
        }
        let idx: Vec<usize> = mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
        let src = self.nodes[x.0].value.data();
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        self.push(
            "masked_select",
            NdArray::from_parts(vec![idx.len()], data),
            Op::MaskedSelect { x, idx },
            &[x],
        )
    }

    /// Selective state-space scan with bilinear discretization.
    ///
    /// Shapes: `u, delta: [.., L, C]`, `b, c: [.., L, n]`, `a_log: [C, n]`,
    /// `d: [C]`. The continuous diagonal is `a = -exp(a_log)`; each step uses
    /// `a_bar = (1 + delta*a/2) / (1 - delta*a/2)` and
    /// `b_bar = delta*b / (1 - delta*a/2)`. Output is
    /// `y_t = <c_t, h_t> + d * u_t` per channel.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        b: Var,
        c: Var,
        a_log: Var,
        d: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let nd = us.len();
        let als = self.shape(a_log).to_vec();
        let bad = nd < 2
            || self.shape(delta) != us.as_slice()
            || als.len() != 2
            || als[0] != us[nd - 1]
            || self.shape(d) != [als[0]]
            || {
                let mut bs = us.clone();
                bs[nd - 1] = als[1];
                self.shape(b) != bs.as_slice() || self.shape(c) != bs.as_slice()
            };
        if bad {
            return Err(mismatch(
                "selective_scan",
                &[&us, self.shape(delta), self.shape(b), self.shape(c), &als, self.shape(d)],
            ));
        }
        let (l, ch, n) = (us[nd - 2], us[nd - 1], als[1]);
        let outer = us[..nd - 2].iter().product::<usize>();
        let uv = self.nodes[u.0].value.data();
        let dv = self.nodes[delta.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let cv = self.nodes[c.0].value.data();
        let av: Vec<f64> = self.nodes[a_log.0].value.data().iter().map(|v| -v.exp()).collect();
        let skip = self.nodes[d.0].value.data();

        let mut states = vec![0.0; outer * l * ch * n];
        let mut y = vec![0.0; outer * l * ch];
        let mut a_bar = vec![0.0; l * n];
        let mut bx = vec![0.0; l * n];
        for o in 0..outer {
            for k in 0..ch {
                for t in 0..l {
                    let row = (o * l + t) * ch + k;
                    let dt = dv[row];
                    let x = uv[row];
                    let brow = &bv[(o * l + t) * n..(o * l + t + 1) * n];
                    for j in 0..n {
                        let (ab, bb) = ssm::bilinear(av[k * n + j], brow[j], dt);
                        a_bar[t * n + j] = ab;
                        bx[t * n + j] = bb * x;
                    }
                }
                let h = match mode {
                    ScanMode::Sequential => ssm::scan_states_sequential(&a_bar, &bx, n),
                    ScanMode::Parallel(chunk) => ssm::scan_states_parallel(&a_bar, &bx, n, chunk),
                };
                for t in 0..l {
                    let row = (o * l + t) * ch + k;
                    let crow = &cv[(o * l + t) * n..(o * l + t + 1) * n];
                    let hs = &h[t * n..(t + 1) * n];
                    let dst = ((o * l + t) * ch + k) * n;
                    states[dst..dst + n].copy_from_slice(hs);
                    y[row] = crow.iter().zip(hs).map(|(c, h)| c * h).sum::<f64>() + skip[k] * uv[row];
                }
            }
        }
        self.push(
            "selective_scan",
            NdArray::from_parts(us, y),
            Op::Scan(Box::new(ScanSaved { u, delta, b, c, a_log, d, states })),
            &[u, delta, b, c, a_log, d],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc_elementwise(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if let Some(s) = self.slot(grads, v) {
            for (i, (o, &gv)) in s.iter_mut().zip(g).enumerate() {
                *o += f(i, gv);
            }
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_elementwise(grads, *a, g, |_, gv| gv);
                let kind = broadcast_kind(node.value.shape(), self.shape(*b)).expect("checked in forward");
                if let Some(s) = self.slot(grads, *b) {
                    match kind {
                        Broadcast::Same => s.iter_mut().zip(g).for_each(|(o, gv)| *o += gv),
                        Broadcast::Suffix => {
                            let p = s.len();
                            g.iter().enumerate().for_each(|(i, gv)| s[i % p] += gv);
                        }
                        Broadcast::General(map) => g.iter().zip(&map).for_each(|(gv, &j)| s[j] += gv),
                    }
                }
            }
            Op::Sub(a, b) => {
                self.acc_elementwise(grads, *a, g, |_, gv| gv);
                self.acc_elementwise(grads, *b, g, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc_elementwise(grads, *a, g, |i, gv| gv * bv[i]);
                self.acc_elementwise(grads, *b, g, |i, gv| gv * av[i]);
            }
            Op::Scale(x, c) => self.acc_elementwise(grads, *x, g, |_, gv| gv * c),
            Op::MatMul(a, b) => {
                let d = matmul_dims(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let (av, bv) = (val(*a), val(*b));
                let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
                if let Some(s) = self.slot(grads, *a) {
                    for gi in 0..d.groups {
                        let ao = if d.a_batched { gi * sa } else { 0 };
                        let bo = if d.b_batched { gi * sb } else { 0 };
                        mm_nt_acc(&g[gi * so..(gi + 1) * so], &bv[bo..bo + sb], &mut s[ao..ao + sa], d.m, d.k, d.n);
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for gi in 0..d.groups {
                        let ao = if d.a_batched { gi * sa } else { 0 };
                        let bo = if d.b_batched { gi * sb } else { 0 };
                        mm_tn_acc(&av[ao..ao + sa], &g[gi * so..(gi + 1) * so], &mut s[bo..bo + sb], d.m, d.k, d.n);
                    }
                }
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let back = NdArray::from_parts(node.value.shape().to_vec(), g.to_vec())
                    .permute(&inv)
                    .expect("inverse permutation");
                let bd = back.data();
                self.acc_elementwise(grads, *x, bd, |_, gv| gv);
            }
            Op::Reshape(x) => self.acc_elementwise(grads, *x, g, |_, gv| gv),
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut off = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis] * inner;
                    if let Some(s) = self.slot(grads, x) {
                        for o in 0..outer {
                            let src = &g[o * total * inner + off..o * total * inner + off + len];
                            s[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&xs, *axis);
                let len = node.value.shape()[*axis];
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        s[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Flip(x, axis) => {
                let back = flip_data(g, node.value.shape(), *axis);
                self.acc_elementwise(grads, *x, &back, |_, gv| gv);
            }
            Op::Sum(x) => self.acc_elementwise(grads, *x, &vec![g[0]; self.nodes[x.0].value.len()], |_, gv| gv),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let gv = g[0] / n as f64;
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::Sigmoid(x) => self.acc_elementwise(grads, *x, g, |i, gv| gv * out[i] * (1.0 - out[i])),
            Op::Silu(x) => {
                let xv = val(*x);
                self.acc_elementwise(grads, *x, g, |i, gv| {
                    let s = sigmoid(xv[i]);
                    gv * s * (1.0 + xv[i] * (1.0 - s))
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                self.acc_elementwise(grads, *x, g, |i, gv| gv * sigmoid(xv[i]));
            }
            Op::Tanh(x) => self.acc_elementwise(grads, *x, g, |i, gv| gv * (1.0 - out[i] * out[i])),
            Op::Exp(x) => self.acc_elementwise(grads, *x, g, |i, gv| gv * out[i]),
            Op::Softmax(x) => {
                let c = *node.value.shape().last().unwrap();
                if let Some(s) = self.slot(grads, *x) {
                    for ((yr, gr), sr) in out.chunks(c).zip(g.chunks(c)).zip(s.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = *node.value.shape().last().unwrap();
                let gam = val(*gamma);
                if let Some(s) = self.slot(grads, *beta) {
                    for gr in g.chunks(c) {
                        s.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(s) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    for (r, ((gr, hr), sr)) in g.chunks(c).zip(xhat.chunks(c)).zip(s.chunks_mut(c)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            sr[j] += rstd[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let shape = node.value.shape();
                let nd = shape.len();
                let (l, c) = (shape[nd - 2], shape[nd - 1]);
                let outer = shape[..nd - 2].iter().product::<usize>();
                let width = self.shape(*w)[1];
                let (xv, wv) = (val(*x), val(*w));
                if let Some(s) = self.slot(grads, *b) {
                    for gr in g.chunks(c) {
                        s.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(s) = self.slot(grads, *w) {
                    for o in 0..outer {
                        let base = o * l * c;
                        for t in 0..l {
                            for k in 0..width {
                                let src = t as isize - (width - 1) as isize + k as isize;
                                if src < 0 {
                                    continue;
                                }
                                for ch in 0..c {
                                    s[ch * width + k] += g[base + t * c + ch] * xv[base + src as usize * c + ch];
                                }
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let base = o * l * c;
                        for t in 0..l {
                            for k in 0..width {
                                let src = t as isize - (width - 1) as isize + k as isize;
                                if src < 0 {
                                    continue;
                                }
                                for ch in 0..c {
                                    s[base + src as usize * c + ch] += g[base + t * c + ch] * wv[ch * width + k];
                                }
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => self.acc_elementwise(grads, *x, g, |i, gv| gv * mask[i]),
            Op::Embedding { table, idx } => {
                let dim = self.shape(*table)[1];
                if let Some(s) = self.slot(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..dim {
                            s[i * dim + j] += g[r * dim + j];
                        }
                    }
                }
            }
            Op::MaskedSelect { x, idx } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        s[i] += g[r];
                    }
                }
            }
            Op::Scan(saved) => self.scan_backward(saved, g, grads),
        }
    }

    /// Adjoint of the selective scan, always evaluated with the sequential
    /// reverse recurrence `lambda_t = dh_t + a_bar_{t+1} * lambda_{t+1}`.
    fn scan_backward(&self, s: &ScanSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let us = self.shape(s.u).to_vec();
        let nd = us.len();
        let n = self.shape(s.a_log)[1];
        let (l, ch) = (us[nd - 2], us[nd - 1]);
        let outer = us[..nd - 2].iter().product::<usize>();
        let uv = self.value(s.u).data();
        let dv = self.value(s.delta).data();
        let bv = self.value(s.b).data();
        let cv = self.value(s.c).data();
        let alog = self.value(s.a_log).data();
        let av: Vec<f64> = alog.iter().map(|v| -v.exp()).collect();
        let skip = self.value(s.d).data();

        let mut du = vec![0.0; uv.len()];
        let mut ddelta = vec![0.0; dv.len()];
        let mut db = vec![0.0; bv.len()];
        let mut dc = vec![0.0; cv.len()];
        let mut da = vec![0.0; av.len()];
        let mut dd = vec![0.0; skip.len()];
        let mut lambda = vec![0.0; n];
        for o in 0..outer {
            for k in 0..ch {
                lambda.iter_mut().for_each(|v| *v = 0.0);
                for t in (0..l).rev() {
                    let row = (o * l + t) * ch + k;
                    let nrow = (o * l + t) * n;
                    let gy = g[row];
                    let x = uv[row];
                    let dt = dv[row];
                    dd[k] += gy * x;
                    du[row] += gy * skip[k];
                    let h = &s.states[row * n..(row + 1) * n];
                    // contribution of a_bar_{t+1} carried into lambda happens below
                    for j in 0..n {
                        dc[nrow + j] += gy * h[j];
                        lambda[j] += gy * cv[nrow + j];
                    }
                    let mut ddt = 0.0;
                    let mut dx = 0.0;
                    for j in 0..n {
                        let a = av[k * n + j];
                        let bj = bv[nrow + j];
                        let q = 0.5 * dt * a;
                        let den = 1.0 - q;
                        let a_bar = (1.0 + q) / den;
                        let b_bar = dt * bj / den;
                        let h_prev = if t > 0 { s.states[(row - ch) * n + j] } else { 0.0 };
                        let lam = lambda[j];
                        let g_abar = lam * h_prev;
                        let g_bbar = lam * x;
                        dx += lam * b_bar;
                        let dq = g_abar * 2.0 / (den * den) + g_bbar * dt * bj / (den * den);
                        ddt += dq * 0.5 * a + g_bbar * bj / den;
                        da[k * n + j] += dq * 0.5 * dt;
                        db[nrow + j] += g_bbar * dt / den;
                        // propagate to h_{t-1}
                        lambda[j] = lam * a_bar;
                    }
                    ddelta[row] += ddt;
                    du[row] += dx;
                }
            }
        }
        let dalog: Vec<f64> = da.iter().zip(&av).map(|(g, a)| g * a).collect();
        for (v, src) in [(s.u, du), (s.delta, ddelta), (s.b, db), (s.c, dc), (s.a_log, dalog), (s.d, dd)] {
            self.acc_elementwise(grads, v, &src, |_, gv| gv);
        }
    }
}

fn flip_data(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut data = Vec::with_capacity(src.len());
    for o in 0..outer {
        for i in (0..n).rev() {
            let base = (o * n + i) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
    }
    data
}
