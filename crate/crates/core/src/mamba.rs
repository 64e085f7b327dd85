//! Gated Mamba blocks over the time axis, in one- and two-direction form.
//!
//! Input layout is `[.., L, d]`: every leading axis (batch, node) is an
//! independent sequence.

use serde::{Deserialize, Serialize};

use crate::nn::{Ctx, LayerNorm, Linear, ParamBuilder, ParamId, ParamStore};
use crate::ssm::SelectiveSsmParams;
use crate::tape::Var;
use crate::tensor::{mismatch, NdArray, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uni,
    #[default]
    Bi,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaSettings {
    pub expansion: usize,
    pub conv_width: usize,
    pub state_dim: usize,
    pub dropout: f64,
}

impl Default for MambaSettings {
    fn default() -> Self {
        Self { expansion: 2, conv_width: 4, state_dim: 16, dropout: 0.1 }
    }
}

/// Causal depthwise convolution followed by a selective SSM.
#[derive(Clone, Debug)]
pub struct DirectionalPath {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ssm: SelectiveSsmParams,
}

impl DirectionalPath {
    fn new(pb: &mut ParamBuilder<'_>, channels: usize, s: &MambaSettings) -> Self {
        let bound = 1.0 / (s.conv_width as f64).sqrt();
        let conv_w = pb.uniform("conv_w", &[channels, s.conv_width], bound);
        let conv_b = pb.uniform("conv_b", &[channels], bound);
        let ssm = SelectiveSsmParams::new(&mut pb.sub("ssm"), channels, s.state_dim);
        Self { conv_w, conv_b, ssm }
    }

    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = cx.tape.depthwise_conv1d(x, cx.p(self.conv_w), cx.p(self.conv_b))?;
        let c = cx.tape.silu(c)?;
        self.ssm.forward(cx, c)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let s = &self.ssm;
        let mut ids = vec![self.conv_w, self.conv_b, s.a_log, s.d, s.w_b.w, s.w_c.w, s.w_delta.w];
        ids.extend(s.w_delta.b);
        ids
    }
}

#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub norm_in: LayerNorm,
    pub in_proj: Linear,
    pub forward_path: DirectionalPath,
    pub backward_path: Option<DirectionalPath>,
    pub out_proj: Linear,
    pub norm_out: LayerNorm,
    pub dropout: f64,
    pub model_dim: usize,
    pub cond_dim: usize,
    pub inner_dim: usize,
}

impl MambaBlock {
    /// `cond_dim` is the width of the optional prior features concatenated
    /// to the input (0 when the block takes none).
    pub fn new(pb: &mut ParamBuilder<'_>, model_dim: usize, cond_dim: usize, s: &MambaSettings, dir: Direction) -> Self {
        let inner = s.expansion * model_dim;
        let in_dim = model_dim + cond_dim;
        Self {
            norm_in: LayerNorm::new(&mut pb.sub("norm_in"), in_dim),
            in_proj: Linear::new(&mut pb.sub("in_proj"), in_dim, 2 * inner, true),
            forward_path: DirectionalPath::new(&mut pb.sub("fwd"), inner, s),
            backward_path: (dir == Direction::Bi).then(|| DirectionalPath::new(&mut pb.sub("bwd"), inner, s)),
            out_proj: Linear::new(&mut pb.sub("out_proj"), inner, model_dim, true),
            norm_out: LayerNorm::new(&mut pb.sub("norm_out"), model_dim),
            dropout: s.dropout,
            model_dim,
            cond_dim,
            inner_dim: inner,
        }
    }

    pub fn direction(&self) -> Direction {
        if self.backward_path.is_some() {
            Direction::Bi
        } else {
            Direction::Uni
        }
    }

    /// Applies the block to `x: [.., L, d]`, with optional prior features
    /// `h_pri: [.., L, cond_dim]` concatenated before the first norm.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, h_pri: Option<Var>) -> Result<Var> {
        let xs = cx.tape.shape(x).to_vec();
        let nd = xs.len();
        if nd < 2 || xs[nd - 1] != self.model_dim {
            return Err(mismatch("mamba_block", &[&xs]));
        }
        let u = match (h_pri, self.cond_dim) {
            (Some(h), c) if c > 0 => {
                let hs = cx.tape.shape(h);
                if hs[..nd - 1] != xs[..nd - 1] || hs[nd - 1] != c {
                    return Err(mismatch("mamba_block.h_pri", &[&xs, hs]));
                }
                cx.tape.concat(&[x, h], nd - 1)?
            }
            (None, 0) => x,
            (Some(h), _) => return Err(mismatch("mamba_block.h_pri", &[&xs, cx.tape.shape(h)])),
            (None, _) => return Err(mismatch("mamba_block.h_pri", &[&xs, &[]])),
        };
        let u = self.norm_in.forward(cx, u)?;
        let u = cx.dropout(u, self.dropout)?;
        let proj = self.in_proj.forward(cx, u)?;
        let xs_in = cx.tape.slice(proj, nd - 1, 0, self.inner_dim)?;
        let gate = cx.tape.slice(proj, nd - 1, self.inner_dim, self.inner_dim)?;

        let mut y = self.forward_path.forward(cx, xs_in)?;
        if let Some(bwd) = &self.backward_path {
            let rev = cx.tape.flip(xs_in, nd - 2)?;
            let yb = bwd.forward(cx, rev)?;
            let yb = cx.tape.flip(yb, nd - 2)?;
            y = cx.tape.add(y, yb)?;
        }
        let g = cx.tape.silu(gate)?;
        let y = cx.tape.mul(y, g)?;
        let o = self.out_proj.forward(cx, y)?;
        let o = self.norm_out.forward(cx, o)?;
        cx.tape.add(x, o)
    }

    /// Exchanges the values of the forward and backward path parameters.
    pub fn swap_directions(&self, store: &mut ParamStore) {
        let Some(bwd) = &self.backward_path else { return };
        for (f, b) in self.forward_path.param_ids().into_iter().zip(bwd.param_ids()) {
            let fv = store.get(f).clone();
            let bv = std::mem::replace(store.get_mut(b), fv);
            *store.get_mut(f) = bv;
        }
    }

    /// Copies the forward path parameters into the backward path.
    pub fn tie_directions(&self, store: &mut ParamStore) {
        let Some(bwd) = &self.backward_path else { return };
        for (f, b) in self.forward_path.param_ids().into_iter().zip(bwd.param_ids()) {
            let fv = store.get(f).clone();
            *store.get_mut(b) = fv;
        }
    }

    pub fn zero_out_proj(&self, store: &mut ParamStore) {
        *store.get_mut(self.out_proj.w) = NdArray::zeros(&[self.inner_dim, self.model_dim]);
        if let Some(b) = self.out_proj.b {
            *store.get_mut(b) = NdArray::zeros(&[self.model_dim]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn block(dir: Direction, cond: usize, seed: u64) -> (ParamStore, MambaBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = MambaSettings { expansion: 2, conv_width: 4, state_dim: 4, dropout: 0.1 };
        let b = MambaBlock::new(&mut ParamBuilder::new(&mut store, &mut rng).sub("m"), 3, cond, &s, dir);
        (store, b)
    }

    fn randn(shape: &[usize], seed: u64) -> NdArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        NdArray::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    fn run(store: &ParamStore, b: &MambaBlock, x: &NdArray, h: Option<&NdArray>) -> NdArray {
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, store, false, 0);
        let xv = cx.tape.constant(x.clone());
        let hv = h.map(|h| cx.tape.constant(h.clone()));
        let y = b.forward(&mut cx, xv, hv).unwrap();
        cx.tape.value(y).clone()
    }

    #[test]
    fn zero_out_proj_is_residual_identity() {
        for dir in [Direction::Uni, Direction::Bi] {
            let (mut store, b) = block(dir, 0, 1);
            b.zero_out_proj(&mut store);
            let x = randn(&[2, 5, 3], 2);
            assert_eq!(run(&store, &b, &x, None), x);
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let (store, b) = block(Direction::Bi, 0, 3);
        for l in [1, 2, 7] {
            let x = randn(&[2, 1, l, 3], 4);
            assert_eq!(run(&store, &b, &x, None).shape(), &[2, 1, l, 3]);
        }
    }

    #[test]
    fn h_pri_shape_is_checked() {
        let (store, b) = block(Direction::Bi, 2, 5);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, false, 0);
        let x = cx.tape.constant(randn(&[4, 3], 6));
        let bad = cx.tape.constant(randn(&[4, 3], 7));
        assert!(b.forward(&mut cx, x, Some(bad)).is_err());
        assert!(b.forward(&mut cx, x, None).is_err());
        let good = cx.tape.constant(randn(&[4, 2], 7));
        assert!(b.forward(&mut cx, x, Some(good)).is_ok());
    }

    #[test]
    fn time_reversal_with_swapped_paths_reverses_output() {
        let (mut store, b) = block(Direction::Bi, 2, 8);
        let x = randn(&[2, 6, 3], 9);
        let h = randn(&[2, 6, 2], 10);
        let y = run(&store, &b, &x, Some(&h));
        b.swap_directions(&mut store);
        let flip = |a: &NdArray| {
            let mut t = Tape::new();
            let v = t.constant(a.clone());
            let f = t.flip(v, 1).unwrap();
            t.value(f).clone()
        };
        let yr = run(&store, &b, &flip(&x), Some(&flip(&h)));
        assert_eq!(flip(&y), yr);
    }

    #[test]
    fn tied_paths_on_palindrome_contribute_equally() {
        let (mut store, b) = block(Direction::Bi, 0, 11);
        b.tie_directions(&mut store);
        // palindromic in time: x_t = x_{L-1-t}
        let w = b.inner_dim;
        let base = randn(&[3, w], 12);
        let mut data = Vec::new();
        for t in [0, 1, 2, 1, 0] {
            data.extend_from_slice(&base.data()[t * w..(t + 1) * w]);
        }
        let x = NdArray::new(vec![5, w], data).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, false, 0);
        let xv = cx.tape.constant(x);
        let yf = b.forward_path.forward(&mut cx, xv).unwrap();
        let bwd = b.backward_path.as_ref().unwrap();
        let r = cx.tape.flip(xv, 0).unwrap();
        let yb = bwd.forward(&mut cx, r).unwrap();
        assert_eq!(cx.tape.value(yf), cx.tape.value(yb));
    }

    #[test]
    fn length_one_uni_and_tied_bi_agree() {
        let (mut bi_store, bi) = block(Direction::Bi, 0, 13);
        bi.tie_directions(&mut bi_store);
        let (mut uni_store, uni) = block(Direction::Uni, 0, 13);
        // copy every shared parameter by name
        for name in uni_store.names().to_vec() {
            *uni_store.by_name_mut(&name).unwrap() = bi_store.by_name(&name).unwrap().clone();
        }
        // The bias is not doubled with the paths, so take it out of the
        // comparison, and lift the pre-norm variance well above the norm's
        // epsilon so the doubling is all that remains.
        for st in [&mut bi_store, &mut uni_store] {
            *st.by_name_mut("m.out_proj.b").unwrap() = NdArray::zeros(&[3]);
            let w = st.by_name_mut("m.out_proj.w").unwrap();
            *w = w.map(|v| 100.0 * v);
        }
        let x = randn(&[4, 1, 3], 14);
        let a = run(&bi_store, &bi, &x, None);
        let b = run(&uni_store, &uni, &x, None);
        assert!(a.max_abs_diff(&b) < 1e-3, "{}", a.max_abs_diff(&b));
    }
}
