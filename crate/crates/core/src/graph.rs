//! Sensor graph construction and the spatial mixing layers.
//!
//! Spatial layers act on `[B, N, L, d]` and mix only across the node axis,
//! independently at every time step.

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamBuilder, ParamId};
use crate::tape::Var;
use crate::tensor::{mismatch, NdArray, TensorError};

/// Static sensor graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    pub coords: Vec<[f64; 2]>,
    /// Nonnegative, symmetric, zero diagonal, `[N, N]`.
    pub adjacency: NdArray,
    /// `D^{-1/2} (A + I) D^{-1/2}`.
    pub normalized: NdArray,
}

impl GraphSpec {
    pub fn nodes(&self) -> usize {
        self.adjacency.shape()[0]
    }

    pub fn from_adjacency(adjacency: NdArray, coords: Vec<[f64; 2]>) -> Result<Self> {
        let s = adjacency.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Graph(format!("adjacency must be square, got {s:?}")));
        }
        let n = s[0];
        for i in 0..n {
            if adjacency.get(&[i, i]) != 0.0 {
                return Err(Error::Graph(format!("nonzero diagonal at node {i}")));
            }
            for j in 0..n {
                let v = adjacency.get(&[i, j]);
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Graph(format!("invalid weight {v} at ({i}, {j})")));
                }
            }
        }
        let normalized = normalize(&adjacency);
        Ok(Self { coords, adjacency, normalized })
    }

    /// Weighted degree of each node.
    pub fn degrees(&self) -> Vec<f64> {
        let n = self.nodes();
        (0..n).map(|i| (0..n).map(|j| self.adjacency.get(&[i, j])).sum()).collect()
    }
}

/// Symmetric normalization with self loops.
pub fn normalize(adj: &NdArray) -> NdArray {
    let n = adj.shape()[0];
    let deg: Vec<f64> = (0..n).map(|i| 1.0 + (0..n).map(|j| adj.get(&[i, j])).sum::<f64>()).collect();
    let mut out = NdArray::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let a = adj.get(&[i, j]) + if i == j { 1.0 } else { 0.0 };
            out.set(&[i, j], a / (deg[i] * deg[j]).sqrt());
        }
    }
    out
}

/// Thresholded Gaussian kernel on Euclidean distances.
pub fn build_adjacency(coords: &[[f64; 2]], length_scale: f64, threshold: f64) -> Result<GraphSpec> {
    let n = coords.len();
    if n < 2 {
        return Err(Error::Graph(format!("need at least 2 nodes, got {n}")));
    }
    if !(length_scale > 0.0) {
        return Err(Error::Graph(format!("length scale must be positive, got {length_scale}")));
    }
    let mut adj = NdArray::zeros(&[n, n]);
    let mut any = false;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            let w = (-(dx * dx + dy * dy) / (length_scale * length_scale)).exp();
            if w >= threshold {
                adj.set(&[i, j], w);
                any = true;
            }
        }
    }
    if !any {
        return Err(Error::EmptyGraph { threshold });
    }
    GraphSpec::from_adjacency(adj, coords.to_vec())
}

/// One-hop message passing: `H' = silu(Â H W1 + H W2 + b) + H`.
#[derive(Clone, Debug)]
pub struct Mpnn {
    pub neighbor: Linear,
    pub self_loop: Linear,
}

impl Mpnn {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Self {
        Self {
            neighbor: Linear::new(&mut pb.sub("neighbor"), dim, dim, false),
            self_loop: Linear::new(&mut pb.sub("self"), dim, dim, true),
        }
    }

    /// `h: [B, N, L, d]`, `a_hat`: constant `[N, N]` on the same tape.
    pub fn forward(&self, cx: &mut Ctx<'_>, h: Var, a_hat: Var) -> Result<Var> {
        let s = cx.tape.shape(h).to_vec();
        if s.len() != 4 || cx.tape.shape(a_hat) != [s[1], s[1]] {
            return Err(mismatch("mpnn", &[&s, cx.tape.shape(a_hat)]).into());
        }
        let flat = cx.tape.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
        let mixed = cx.tape.matmul(a_hat, flat)?;
        let mixed = cx.tape.reshape(mixed, &s)?;
        let m = self.neighbor.forward(cx, mixed)?;
        let own = self.self_loop.forward(cx, h)?;
        let pre = cx.tape.add(m, own)?;
        let act = cx.tape.silu(pre)?;
        Ok(cx.tape.add(act, h)?)
    }
}

/// Node-axis multi-head attention through `k` virtual nodes.
///
/// Real nodes are pooled into `k` tokens with softmax weights over nodes
/// (one learned score vector per virtual node), the tokens attend to each
/// other, and each real node reads back a softmax mixture of the tokens.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub pool_scores: ParamId,
    pub expand_scores: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub virtual_nodes: usize,
    pub dim: usize,
}

/// Intermediate weights of one attention pass, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    /// `[G, k, N]`, rows sum to one over nodes.
    pub pool: Var,
    /// `[G, N, k]`, rows sum to one over virtual nodes.
    pub expand: Var,
    /// `[G, heads, k, k]`, rows sum to one over keys.
    pub attention: Var,
}

impl SpatialAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, virtual_nodes: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("channel size {dim} not divisible by {heads} heads")));
        }
        if virtual_nodes == 0 {
            return Err(Error::Config("need at least one virtual node".into()));
        }
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            pool_scores: pb.normal("pool_scores", &[dim, virtual_nodes], std),
            expand_scores: pb.normal("expand_scores", &[dim, virtual_nodes], std),
            q: Linear::new(&mut pb.sub("q"), dim, dim, false),
            k: Linear::new(&mut pb.sub("k"), dim, dim, false),
            v: Linear::new(&mut pb.sub("v"), dim, dim, false),
            o: Linear::new(&mut pb.sub("o"), dim, dim, true),
            heads,
            virtual_nodes,
            dim,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, h: Var) -> Result<Var> {
        self.forward_traced(cx, h).map(|(y, _)| y)
    }

    pub fn forward_traced(&self, cx: &mut Ctx<'_>, h: Var) -> Result<(Var, AttentionTrace)> {
        let s = cx.tape.shape(h).to_vec();
        if s.len() != 4 || s[3] != self.dim {
            return Err(mismatch("spatial_attention", &[&s]).into());
        }
        let (b, n, l, d) = (s[0], s[1], s[2], s[3]);
        if self.virtual_nodes > n {
            return Err(Error::Config(format!("{} virtual nodes exceed {n} graph nodes", self.virtual_nodes)));
        }
        let (ps, es) = (cx.p(self.pool_scores), cx.p(self.expand_scores));
        let t = &mut *cx.tape;
        let x = t.permute(h, &[0, 2, 1, 3])?;
        let x = t.reshape(x, &[b * l, n, d])?;
        let sc = t.matmul(x, ps)?;
        let sc = t.transpose(sc)?;
        let pool = t.softmax(sc)?;
        let se = t.matmul(x, es)?;
        let expand = t.softmax(se)?;
        let (y, attention) = self.attend(cx, x, pool, expand)?;
        let t = &mut *cx.tape;
        let y = t.reshape(y, &[b, l, n, d])?;
        let y = t.permute(y, &[0, 2, 1, 3])?;
        let out = t.add(h, y)?;
        Ok((out, AttentionTrace { pool, expand, attention }))
    }

    /// Attention update for `x: [G, N, d]` given explicit pooling `[G, k, N]`
    /// and expansion `[G, N, k]` weights; returns `(update, attention)`
    /// without the residual.
    pub fn attend(&self, cx: &mut Ctx<'_>, x: Var, pool: Var, expand: Var) -> Result<(Var, Var)> {
        let (g, d) = (cx.tape.shape(x)[0], self.dim);
        let k = cx.tape.shape(pool)[1];
        let (h, dh) = (self.heads, self.dim / self.heads);
        let tokens = cx.tape.matmul(pool, x)?;
        let q = self.q.forward(cx, tokens)?;
        let kk = self.k.forward(cx, tokens)?;
        let v = self.v.forward(cx, tokens)?;
        let t = &mut *cx.tape;
        let split = |t: &mut crate::tape::Tape, z: Var| -> Result<Var, TensorError> {
            let z = t.reshape(z, &[g, k, h, dh])?;
            t.permute(z, &[0, 2, 1, 3])
        };
        let q = split(t, q)?;
        let kk = split(t, kk)?;
        let v = split(t, v)?;
        let kt = t.transpose(kk)?;
        let scores = t.matmul(q, kt)?;
        let scores = t.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attention = t.softmax(scores)?;
        let o = t.matmul(attention, v)?;
        let o = t.permute(o, &[0, 2, 1, 3])?;
        let o = t.reshape(o, &[g, k, d])?;
        let o = self.o.forward(cx, o)?;
        let y = cx.tape.matmul(expand, o)?;
        Ok((y, attention))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coincident_nodes_have_unit_weight() {
        let g = build_adjacency(&[[0.0, 0.0], [0.0, 0.0]], 1.0, 0.5).unwrap();
        assert_eq!(g.adjacency.get(&[0, 1]), 1.0);
        assert_eq!(g.adjacency.get(&[0, 0]), 0.0);
    }

    #[test]
    fn threshold_above_one_is_empty() {
        let err = build_adjacency(&[[0.0, 0.0], [0.0, 0.0]], 1.0, 1.01).unwrap_err();
        assert!(matches!(err, Error::EmptyGraph { .. }));
        assert!(err.to_string().contains("lower the threshold"));
    }

    #[test]
    fn unit_square_weights() {
        let c = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let g = build_adjacency(&c, 1.0, 0.3).unwrap();
        let side = (-1.0f64).exp();
        // diagonal distance^2 = 2 gives e^-2 ~ 0.135 < 0.3
        for (i, j, w) in [(0, 1, side), (1, 2, side), (2, 3, side), (3, 0, side), (0, 2, 0.0), (1, 3, 0.0)] {
            assert_eq!(g.adjacency.get(&[i, j]), w);
            assert_eq!(g.adjacency.get(&[j, i]), w);
        }
        // every node has degree 2e^-1; normalized entries are 1/(1+2e^-1) or e^-1/(1+2e^-1)
        let dd = 1.0 + 2.0 * side;
        assert!((g.normalized.get(&[0, 0]) - 1.0 / dd).abs() < 1e-15);
        assert!((g.normalized.get(&[0, 1]) - side / dd).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_adjacency(&[[0.0, 0.0]], 1.0, 0.1).is_err());
        assert!(build_adjacency(&[[0.0, 0.0], [1.0, 0.0]], 0.0, 0.1).is_err());
        let mut a = NdArray::zeros(&[2, 2]);
        a.set(&[0, 0], 1.0);
        assert!(GraphSpec::from_adjacency(a, vec![]).is_err());
    }
}
