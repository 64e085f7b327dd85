//! Named parameter storage, initialization, and the forward context that
//! binds parameters onto a tape.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tape::{ScanMode, Tape, Var};
use crate::tensor::{NdArray, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of learnable tensors addressed by dotted names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<NdArray>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(NdArray::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &NdArray {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&NdArray> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut NdArray> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[NdArray] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [NdArray] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut count = 0;
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                value.data_mut().iter_mut().for_each(|v| *v = 0.0);
                count += 1;
            }
        }
        count
    }
}

/// Creates parameters under a name prefix with a seeded initializer.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: NdArray) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.tensor(name, NdArray::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                z * std
            })
            .collect();
        self.tensor(name, NdArray::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, NdArray::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, NdArray::full(shape, 1.0))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

/// One forward pass: a tape with every stored parameter bound as a leaf.
pub struct Ctx<'t> {
    pub tape: &'t mut Tape,
    params: Vec<Var>,
    pub train: bool,
    pub scan: ScanMode,
    rng: ChaCha8Rng,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t mut Tape, store: &ParamStore, train: bool, seed: u64) -> Self {
        let params = store.values().iter().map(|v| tape.param(v.clone())).collect();
        Self { tape, params, train, scan: ScanMode::Sequential, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Context over leaves already on the tape, one per stored parameter in order.
    pub fn with_vars(tape: &'t mut Tape, params: Vec<Var>, train: bool, seed: u64) -> Self {
        Self { tape, params, train, scan: ScanMode::Sequential, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.tape.dropout(x, p, self.train, &mut self.rng)
    }
}

/// Affine map over the last axis: `x @ w + b` with `w: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = pb.uniform("w", &[in_dim, out_dim], bound);
        let b = bias.then(|| pb.uniform("b", &[out_dim], bound));
        Self { w, b, in_dim, out_dim }
    }

    pub fn zeroed(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let w = pb.zeros("w", &[in_dim, out_dim]);
        let b = bias.then(|| pb.zeros("b", &[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = cx.tape.matmul(x, cx.p(self.w))?;
        match self.b {
            Some(b) => cx.tape.add(y, cx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Self {
        Self { gamma: pb.ones("gamma", &[dim]), beta: pb.zeros("beta", &[dim]) }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        cx.tape.layer_norm(x, cx.p(self.gamma), cx.p(self.beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_prefixes_names() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let mut block = pb.sub("block");
        let lin = Linear::new(&mut block.sub("proj"), 3, 2, true);
        assert_eq!(store.names(), &["block.proj.w", "block.proj.b"]);
        assert_eq!(store.get(lin.w).shape(), &[3, 2]);
        assert_eq!(store.num_scalars(), 8);
    }

    #[test]
    fn linear_forward_over_leading_axes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut ParamBuilder::new(&mut store, &mut rng), 2, 3, true);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, false, 0);
        let x = cx.tape.constant(NdArray::full(&[4, 5, 2], 1.0));
        let y = lin.forward(&mut cx, x).unwrap();
        let w = store.get(lin.w);
        let b = store.get(lin.b.unwrap());
        let expect = w.get(&[0, 1]) + w.get(&[1, 1]) + b.get(&[1]);
        assert_eq!(cx.tape.shape(y), &[4, 5, 3]);
        assert!((cx.tape.value(y).get(&[3, 4, 1]) - expect).abs() < 1e-15);
    }
}
