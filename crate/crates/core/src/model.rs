//! The noise-prediction network: a conditional feature extractor producing
//! prior features, a stack of noise-estimation modules with aggregated skip
//! outputs, and a per-entry output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{quadratic_schedule, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::graph::{Mpnn, SpatialAttention};
use crate::mamba::{Direction, MambaBlock, MambaSettings};
use crate::nn::{Ctx, Linear, ParamBuilder, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::NdArray;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel size `d`.
    pub channels: usize,
    /// Number of noise-estimation modules.
    pub layers: usize,
    pub heads: usize,
    /// Requested virtual nodes; the model uses `min(virtual_nodes, nodes)`.
    pub virtual_nodes: usize,
    pub mamba: MambaSettings,
    pub seq_len: usize,
    pub nodes: usize,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub direction: Direction,
    /// Width of the sinusoidal diffusion-step features.
    pub step_embedding_dim: usize,
    /// Chunk length of the parallel scan; 0 selects the sequential scan.
    pub scan_chunk: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            layers: 2,
            heads: 4,
            virtual_nodes: 4,
            mamba: MambaSettings::default(),
            seq_len: 24,
            nodes: 8,
            diffusion_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.2,
            direction: Direction::Bi,
            step_embedding_dim: 32,
            scan_chunk: 0,
        }
    }
}

impl ModelConfig {
    /// Full-scale hyperparameters for one of the benchmark datasets
    /// (`aqi36`, `metr-la`, `pems-bay`).
    pub fn full_scale(dataset: &str, nodes: usize) -> Result<Self> {
        let (seq_len, steps, k) = match dataset {
            "aqi36" => (36, 100, 16),
            "metr-la" | "pems-bay" => (24, 50, 64),
            other => return Err(Error::Config(format!("unknown dataset preset {other}"))),
        };
        Ok(Self {
            channels: 64,
            layers: 4,
            heads: 8,
            virtual_nodes: k,
            mamba: MambaSettings { expansion: 2, conv_width: 4, state_dim: 16, dropout: 0.1 },
            seq_len,
            nodes,
            diffusion_steps: steps,
            beta_min: 1e-4,
            beta_max: 0.2,
            direction: Direction::Bi,
            step_embedding_dim: 128,
            scan_chunk: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("layers", self.layers),
            ("heads", self.heads),
            ("virtual_nodes", self.virtual_nodes),
            ("mamba.expansion", self.mamba.expansion),
            ("mamba.conv_width", self.mamba.conv_width),
            ("mamba.state_dim", self.mamba.state_dim),
            ("seq_len", self.seq_len),
            ("nodes", self.nodes),
            ("diffusion_steps", self.diffusion_steps),
            ("step_embedding_dim", self.step_embedding_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("channels {} not divisible by heads {}", self.channels, self.heads)));
        }
        if !self.step_embedding_dim.is_multiple_of(2) {
            return Err(Error::Config("step_embedding_dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.mamba.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.mamba.dropout)));
        }
        quadratic_schedule(self.diffusion_steps, self.beta_min, self.beta_max)?;
        Ok(())
    }

    pub fn effective_virtual_nodes(&self) -> usize {
        self.virtual_nodes.min(self.nodes)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        quadratic_schedule(self.diffusion_steps, self.beta_min, self.beta_max)
    }
}

/// Sinusoidal features of a diffusion step: `[sin(t f_i)..., cos(t f_i)...]`
/// with `f_i = 10000^(-i / (dim/2))`.
pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim.is_multiple_of(2), "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp()).collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t as f64 * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    out
}

/// Conditioning shared by every denoising step of a batch.
#[derive(Clone, Debug)]
pub struct ConditioningBundle {
    /// Linearly interpolated series, `[B, N, L]`, complete.
    pub interpolated: NdArray,
    /// Conditioning (observed, non-target) indicator, `[B, N, L]`.
    pub cond_mask: Vec<bool>,
    /// Normalized adjacency, `[N, N]`.
    pub a_hat: NdArray,
    /// Diffusion step per batch element.
    pub steps: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Cfem {
    pub input: Linear,
    pub temporal: MambaBlock,
    pub attention: SpatialAttention,
    pub mpnn: Mpnn,
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
}

impl Cfem {
    fn new(pb: &mut ParamBuilder<'_>, c: &ModelConfig) -> Result<Self> {
        let d = c.channels;
        Ok(Self {
            input: Linear::new(&mut pb.sub("input"), 1, d, true),
            temporal: MambaBlock::new(&mut pb.sub("temporal"), d, 0, &c.mamba, Direction::Bi),
            attention: SpatialAttention::new(&mut pb.sub("attention"), d, c.heads, c.effective_virtual_nodes())?,
            mpnn: Mpnn::new(&mut pb.sub("mpnn"), d),
            mlp_hidden: Linear::new(&mut pb.sub("mlp_hidden"), d, d, true),
            mlp_out: Linear::new(&mut pb.sub("mlp_out"), d, d, true),
        })
    }

    /// `interp: [B, N, L]` constant, `node_emb: [1, N, 1, d]` → `H^pri: [B, N, L, d]`.
    pub fn forward(&self, cx: &mut Ctx<'_>, interp: Var, node_emb: Var, a_hat: Var) -> Result<Var> {
        let s = cx.tape.shape(interp).to_vec();
        let x = cx.tape.reshape(interp, &[s[0], s[1], s[2], 1])?;
        let h = self.input.forward(cx, x)?;
        let h = cx.tape.add(h, node_emb)?;
        let h = self.temporal.forward(cx, h, None)?;
        let h = self.attention.forward(cx, h)?;
        let h = self.mpnn.forward(cx, h, a_hat)?;
        let m = self.mlp_hidden.forward(cx, h)?;
        let m = cx.tape.silu(m)?;
        Ok(self.mlp_out.forward(cx, m)?)
    }
}

#[derive(Clone, Debug)]
pub struct Nem {
    pub step_proj: Linear,
    pub temporal: MambaBlock,
    pub attention: SpatialAttention,
    pub mpnn: Mpnn,
    pub gate: Linear,
    pub output: Linear,
    pub dim: usize,
}

impl Nem {
    fn new(pb: &mut ParamBuilder<'_>, c: &ModelConfig) -> Result<Self> {
        let d = c.channels;
        Ok(Self {
            step_proj: Linear::new(&mut pb.sub("step_proj"), d, d, true),
            temporal: MambaBlock::new(&mut pb.sub("temporal"), d, d, &c.mamba, c.direction),
            attention: SpatialAttention::new(&mut pb.sub("attention"), d, c.heads, c.effective_virtual_nodes())?,
            mpnn: Mpnn::new(&mut pb.sub("mpnn"), d),
            gate: Linear::new(&mut pb.sub("gate"), d, 2 * d, true),
            output: Linear::new(&mut pb.sub("output"), d, 2 * d, true),
            dim: d,
        })
    }

    /// Returns `(H^next, H^out)`. `t_emb: [B, 1, 1, d]`.
    pub fn forward(&self, cx: &mut Ctx<'_>, h_in: Var, h_pri: Var, a_hat: Var, t_emb: Var) -> Result<(Var, Var)> {
        let nd = cx.tape.shape(h_in).len();
        let te = self.step_proj.forward(cx, t_emb)?;
        let h = cx.tape.add(h_in, te)?;
        let h = self.temporal.forward(cx, h, Some(h_pri))?;
        let h = self.attention.forward(cx, h)?;
        let h = self.mpnn.forward(cx, h, a_hat)?;
        let g = self.gate.forward(cx, h)?;
        let ga = cx.tape.slice(g, nd - 1, 0, self.dim)?;
        let gb = cx.tape.slice(g, nd - 1, self.dim, self.dim)?;
        let ga = cx.tape.sigmoid(ga)?;
        let gb = cx.tape.tanh(gb)?;
        let g = cx.tape.mul(ga, gb)?;
        let o = self.output.forward(cx, g)?;
        let res = cx.tape.slice(o, nd - 1, 0, self.dim)?;
        let skip = cx.tape.slice(o, nd - 1, self.dim, self.dim)?;
        let next = cx.tape.add(h_in, res)?;
        Ok((next, skip))
    }

    pub fn zero_output(&self, store: &mut ParamStore) {
        *store.get_mut(self.output.w) = NdArray::zeros(&[self.dim, 2 * self.dim]);
        if let Some(b) = self.output.b {
            *store.get_mut(b) = NdArray::zeros(&[2 * self.dim]);
        }
    }
}

/// The noise-prediction network with its parameters.
#[derive(Clone, Debug)]
pub struct Timba {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub input: Linear,
    pub node_embedding: ParamId,
    pub step_hidden: Linear,
    pub step_out: Linear,
    pub cfem: Cfem,
    pub nems: Vec<Nem>,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

/// Number of per-entry input features: masked noisy value, interpolated
/// value, conditioning indicator.
pub const INPUT_FEATURES: usize = 3;

impl Timba {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let d = config.channels;
        let input = Linear::new(&mut pb.sub("input"), INPUT_FEATURES, d, true);
        let node_embedding = pb.normal("node_embedding", &[config.nodes, d], 0.1);
        let step_hidden = Linear::new(&mut pb.sub("step_hidden"), config.step_embedding_dim, d, true);
        let step_out = Linear::new(&mut pb.sub("step_out"), d, d, true);
        let cfem = Cfem::new(&mut pb.sub("cfem"), &config)?;
        let nems = (0..config.layers)
            .map(|i| Nem::new(&mut pb.sub(&format!("nem{i}")), &config))
            .collect::<Result<Vec<_>>>()?;
        let head_hidden = Linear::new(&mut pb.sub("head_hidden"), d, d, true);
        let head_out = Linear::new(&mut pb.sub("head_out"), d, 1, true);
        Ok(Self { config, params, input, node_embedding, step_hidden, step_out, cfem, nems, head_hidden, head_out })
    }

    /// Rebuilds the architecture for `config` and installs `params`, which
    /// must match it name for name and shape for shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((name, want), (got_name, got)) in model.params.iter().zip(params.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got_name} {:?} does not match {name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Diffusion-step conditioning vector `[B, 1, 1, d]`.
    pub fn step_features(&self, cx: &mut Ctx<'_>, steps: &[usize]) -> Result<Var> {
        let dim = self.config.step_embedding_dim;
        for &t in steps {
            if t == 0 || t > self.config.diffusion_steps {
                return Err(Error::StepOutOfRange { t, max: self.config.diffusion_steps });
            }
        }
        let data: Vec<f64> = steps.iter().flat_map(|&t| step_embedding(t, dim)).collect();
        let e = cx.tape.constant(NdArray::new(vec![steps.len(), 1, 1, dim], data)?);
        let h = self.step_hidden.forward(cx, e)?;
        let h = cx.tape.silu(h)?;
        let h = self.step_out.forward(cx, h)?;
        Ok(cx.tape.silu(h)?)
    }

    pub fn node_features(&self, cx: &mut Ctx<'_>) -> Result<Var> {
        let n = self.config.nodes;
        let idx: Vec<usize> = (0..n).collect();
        let e = cx.tape.embedding_lookup(cx.p(self.node_embedding), &idx)?;
        Ok(cx.tape.reshape(e, &[1, n, 1, self.config.channels])?)
    }

    /// Predicts the noise in `noisy: [B, N, L]`.
    pub fn epsilon_theta(&self, cx: &mut Ctx<'_>, noisy: &NdArray, bundle: &ConditioningBundle) -> Result<Var> {
        let s = noisy.shape();
        if s.len() != 3 || s[1] != self.config.nodes {
            return Err(Error::Config(format!(
                "input shape {s:?} does not match a model over {} nodes",
                self.config.nodes
            )));
        }
        let (b, n, l) = (s[0], s[1], s[2]);
        if bundle.interpolated.shape() != s
            || bundle.cond_mask.len() != noisy.len()
            || bundle.steps.len() != b
            || bundle.a_hat.shape() != [n, n]
        {
            return Err(Error::Config("conditioning bundle does not match the noisy input".into()));
        }
        cx.scan = match self.config.scan_chunk {
            0 => crate::tape::ScanMode::Sequential,
            c => crate::tape::ScanMode::Parallel(c),
        };
        let mut feats = Vec::with_capacity(noisy.len() * INPUT_FEATURES);
        for i in 0..noisy.len() {
            let m = bundle.cond_mask[i];
            feats.push(if m { 0.0 } else { noisy.data()[i] });
            feats.push(bundle.interpolated.data()[i]);
            feats.push(if m { 1.0 } else { 0.0 });
        }
        let x = cx.tape.constant(NdArray::new(vec![b, n, l, INPUT_FEATURES], feats)?);
        let interp = cx.tape.constant(bundle.interpolated.clone());
        let a_hat = cx.tape.constant(bundle.a_hat.clone());

        let node_emb = self.node_features(cx)?;
        let t_emb = self.step_features(cx, &bundle.steps)?;
        let h_pri = self.cfem.forward(cx, interp, node_emb, a_hat)?;

        let h = self.input.forward(cx, x)?;
        let h = cx.tape.add(h, node_emb)?;
        let mut h = cx.tape.silu(h)?;
        let mut skip: Option<Var> = None;
        for nem in &self.nems {
            let (next, out) = nem.forward(cx, h, h_pri, a_hat, t_emb)?;
            h = next;
            skip = Some(match skip {
                Some(s) => cx.tape.add(s, out)?,
                None => out,
            });
        }
        let skip = skip.expect("at least one layer");
        let skip = cx.tape.scale(skip, 1.0 / (self.nems.len() as f64).sqrt())?;
        let y = self.head_hidden.forward(cx, skip)?;
        let y = cx.tape.silu(y)?;
        let y = self.head_out.forward(cx, y)?;
        Ok(cx.tape.reshape(y, &[b, n, l])?)
    }

    /// Noise prediction as plain values, evaluation mode.
    pub fn predict(&self, noisy: &NdArray, bundle: &ConditioningBundle) -> Result<NdArray> {
        let mut tape = crate::tape::Tape::new();
        let mut cx = Ctx::new(&mut tape, &self.params, false, 0);
        let y = self.epsilon_theta(&mut cx, noisy, bundle)?;
        Ok(cx.tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_embedding_base_pair() {
        let e = step_embedding(3, 2);
        assert_eq!(e, vec![3f64.sin(), 3f64.cos()]);
        assert_eq!(step_embedding(7, 32), step_embedding(7, 32));
    }

    #[test]
    fn step_embeddings_are_distinct() {
        let t_max = 100;
        let embs: Vec<Vec<f64>> = (1..=t_max).map(|t| step_embedding(t, 32)).collect();
        let mut min_gap = f64::INFINITY;
        for i in 0..t_max {
            for j in i + 1..t_max {
                let gap: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                min_gap = min_gap.min(gap);
            }
        }
        assert!(min_gap > 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { layers: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(ModelConfig::full_scale("metr-la", 207).unwrap().validate().is_ok());
        assert!(ModelConfig::full_scale("unknown", 3).is_err());
    }

    #[test]
    fn config_hash_tracks_contents() {
        let a = ModelConfig::default();
        let b = ModelConfig { channels: 8, ..Default::default() };
        assert_eq!(a.hash(), ModelConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"channels": 8, "chanels": 4}"#);
        assert!(err.is_err());
    }
}
