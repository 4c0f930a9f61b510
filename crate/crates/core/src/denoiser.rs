//! Prompt-conditioned spatio-temporal transformer that predicts the clean
//! pose sequence from a noisy one.
//!
//! Pipeline, on `N×J×D` features:
//!
//! ```text
//! embed_input ─ spatial MHSA ─ prompt cross-attention ─ timestamp stylization
//!   ─ temporal MHSA ─ 3 × (spatial MHSA, temporal MHSA) ─ decode head (D→3)
//! ```
//!
//! Every self-attention block is pre-norm residual: `x + MHSA(LN(x))` followed
//! by `x + MLP(LN(x))`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::prompt::{self, PromptBank, PromptEmbedding, PromptVars, TOKEN_BUDGETS};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Feature width `D`.
    pub dim: usize,
    pub heads: usize,
    /// Frames `N`.
    pub frames: usize,
    /// Joints `J`.
    pub joints: usize,
    pub mlp_ratio: f64,
    pub spatial_blocks: usize,
    pub temporal_blocks: usize,
    pub spatio_temporal_blocks: usize,
    /// Adds the pooled prompt to the input and to the stylization vector.
    pub use_prompt: bool,
    /// Prompt cross-attention.
    pub use_fpc: bool,
    /// Timestamp stylization.
    pub use_pts: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            heads: 8,
            frames: 243,
            joints: 17,
            mlp_ratio: 2.0,
            spatial_blocks: 1,
            temporal_blocks: 1,
            spatio_temporal_blocks: 3,
            use_prompt: true,
            use_fpc: true,
            use_pts: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dim % 2 != 0 {
            return Err(Error::Config("dim must be even for the sinusoidal timestamp code".into()));
        }
        if self.frames == 0 || self.joints == 0 {
            return Err(Error::Config("frames and joints must be positive".into()));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return Err(Error::Config(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio)));
        }
        if self.use_fpc && !self.use_prompt {
            return Err(Error::Config("prompt cross-attention needs the prompt enabled".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    /// Names of the residual self-attention blocks in execution order, with
    /// their axis.
    pub fn block_layout(&self) -> Vec<(String, Axis)> {
        let mut out = Vec::new();
        for i in 0..self.spatial_blocks {
            out.push((format!("spatial/{i}"), Axis::Spatial));
        }
        for i in 0..self.temporal_blocks {
            out.push((format!("temporal/{i}"), Axis::Temporal));
        }
        for i in 0..self.spatio_temporal_blocks {
            out.push((format!("st/{i}/spatial"), Axis::Spatial));
            out.push((format!("st/{i}/temporal"), Axis::Temporal));
        }
        out
    }

    /// Every parameter name with its shape, sorted by name.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, h, j, n) = (self.dim, self.hidden(), self.joints, self.frames);
        let mut m = BTreeMap::new();
        let lin = |m: &mut BTreeMap<String, Vec<usize>>, p: &str, i: usize, o: usize| {
            m.insert(format!("{p}/w"), vec![i, o]);
            m.insert(format!("{p}/b"), vec![o]);
        };
        lin(&mut m, "input/proj", 5, d);
        m.insert("input/joint_pos".into(), vec![j, d]);
        m.insert("temporal_pos".into(), vec![n, d]);
        lin(&mut m, "time/fc1", d, d);
        lin(&mut m, "time/fc2", d, d);
        for (p, _) in self.block_layout() {
            for ln in ["ln1", "ln2"] {
                m.insert(format!("{p}/{ln}/g"), vec![d]);
                m.insert(format!("{p}/{ln}/b"), vec![d]);
            }
            for q in ["q", "k", "v"] {
                m.insert(format!("{p}/attn/{q}/w"), vec![d, d]);
            }
            lin(&mut m, &format!("{p}/attn/out"), d, d);
            lin(&mut m, &format!("{p}/mlp/fc1"), d, h);
            lin(&mut m, &format!("{p}/mlp/fc2"), h, d);
        }
        if self.use_fpc {
            m.insert("cross/ln/g".into(), vec![d]);
            m.insert("cross/ln/b".into(), vec![d]);
            for q in ["q", "k", "v"] {
                m.insert(format!("cross/{q}/w"), vec![d, d]);
            }
            lin(&mut m, "cross/out", d, d);
        }
        if self.use_pts {
            lin(&mut m, "pts/phi", d, d);
            lin(&mut m, "pts/psi_w", d, d);
            lin(&mut m, "pts/psi_b", d, d);
        }
        lin(&mut m, "head", d, 3);
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Attention over the joints of each frame.
    Spatial,
    /// Attention over the frames of each joint.
    Temporal,
}

/// Named-tensor map of every learnable denoiser parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserWeights {
    pub tensors: BTreeMap<String, Tensor>,
}

impl DenoiserWeights {
    /// Xavier-normal linear weights, zero biases, unit layer-norm gains.
    /// Positional tables, the stylization projections and the output head are
    /// drawn from N(0, 0.02²); the stylization scale starts at bias 1 so the
    /// block begins close to the identity.
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (i, (name, shape)) in cfg.parameter_shapes().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let mut r = rng::seeded_rng(rng::derive_seed(seed, &[i as u64]));
            let data = if name.ends_with("/g") {
                vec![1.0; n]
            } else if name == "pts/psi_w/b" {
                vec![1.0; n]
            } else if name.ends_with("/b") {
                vec![0.0; n]
            } else if name.ends_with("_pos") {
                rng::gaussian_vec(&mut r, n, 0.02)
            } else if name.starts_with("pts/psi") || name == "head/w" {
                rng::gaussian_vec(&mut r, n, 0.02)
            } else {
                let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                rng::gaussian_vec(&mut r, n, std)
            };
            tensors.insert(name, Tensor::from_vec(shape, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Config(format!("missing weight {name}")))
    }

    /// Checks the map against the shapes implied by `cfg`.
    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        let shapes = cfg.parameter_shapes();
        for (name, shape) in &shapes {
            self.get(name)?.expect_shape(shape).map_err(|e| Error::Shape(format!("{name}: {e}")))?;
        }
        if let Some(extra) = self.tensors.keys().find(|k| !shapes.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected weight {extra}")));
        }
        if let Some((name, _)) = self.tensors.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Divergence(format!("weight {name} is not finite")));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Weights bound into a graph.
pub struct BoundWeights {
    vars: BTreeMap<String, Var>,
}

impl BoundWeights {
    pub fn bind(g: &mut Graph, w: &DenoiserWeights, trainable: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in &w.tensors {
            let v = if trainable { g.param(name, t.clone())? } else { g.constant(t.clone()) };
            vars.insert(name.clone(), v);
        }
        Ok(Self { vars })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing weight {name}")))
    }

    fn linear(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let (w, b) = (self.get(&format!("{prefix}/w"))?, self.get(&format!("{prefix}/b"))?);
        g.linear(x, w, b)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let (gm, bt) = (self.get(&format!("{prefix}/g"))?, self.get(&format!("{prefix}/b"))?);
        g.layer_norm(x, gm, bt)
    }
}

/// Sinusoidal code of `t`: channel `2i` is `sin(t·ω_i)`, `2i+1` is
/// `cos(t·ω_i)`, with `ω_i = 10000^(−2i/D)`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out[2 * i] = (t * w).sin();
        out[2 * i + 1] = (t * w).cos();
    }
    Tensor::from_vec(vec![dim], out).unwrap()
}

/// Sinusoidal code followed by linear → GELU → linear.
pub fn timestamp_embed(g: &mut Graph, w: &BoundWeights, t: usize, dim: usize) -> Result<Var> {
    let s = g.constant(sinusoidal_embedding(t as f64, dim));
    let h = w.linear(g, s, "time/fc1")?;
    let h = g.gelu(h);
    w.linear(g, h, "time/fc2")
}

/// Per-joint `[Y_t, X]` 5-vectors projected to `D`, plus the joint positional
/// table, the pooled prompt and the timestamp embedding.
pub fn embed_input(
    g: &mut Graph,
    w: &BoundWeights,
    yt: &Tensor,
    x: &Tensor,
    t_emb: Var,
    pooled: Option<Var>,
) -> Result<Var> {
    if yt.ndim() != 3 || yt.shape()[2] != 3 {
        return shape_err(format!("noisy pose must be N×J×3, got {:?}", yt.shape()));
    }
    if x.shape() != [yt.shape()[0], yt.shape()[1], 2] {
        return shape_err(format!("keypoints {:?} do not match pose {:?}", x.shape(), yt.shape()));
    }
    let yv = g.constant(yt.clone());
    let xv = g.constant(x.clone());
    let cat = g.concat(&[yv, xv], 2)?;
    let z = w.linear(g, cat, "input/proj")?;
    let z = g.add(z, w.get("input/joint_pos")?)?;
    let z = match pooled {
        Some(p) => g.add(z, p)?,
        None => z,
    };
    g.add(z, t_emb)
}

/// Multi-head scaled dot-product attention on head-major tensors
/// `q [B, Lq, d]`, `k, v [B, Lk, d]`. Returns the context and the attention
/// probabilities `[B, Lq, Lk]`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *g.shape(q).last().unwrap();
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = g.softmax(scores);
    let ctx = g.bmm(probs, v, false)?;
    Ok((ctx, probs))
}

/// `[S, L, D] → [S·H, L, d]`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, l, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, l, d / heads])
}

/// `[S·H, L, d] → [S, L, D]`
fn merge_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (bh, l, dh) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[bh / heads, heads, l, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[bh / heads, l, heads * dh])
}

/// Self-attention over the middle axis of `x [S, L, D]`.
fn self_attention(g: &mut Graph, w: &BoundWeights, x: Var, prefix: &str, heads: usize) -> Result<(Var, Var)> {
    let q = g.matmul(x, w.get(&format!("{prefix}/attn/q/w"))?)?;
    let k = g.matmul(x, w.get(&format!("{prefix}/attn/k/w"))?)?;
    let v = g.matmul(x, w.get(&format!("{prefix}/attn/v/w"))?)?;
    let (q, k, v) = (split_heads(g, q, heads)?, split_heads(g, k, heads)?, split_heads(g, v, heads)?);
    let (ctx, probs) = attention(g, q, k, v)?;
    let ctx = merge_heads(g, ctx, heads)?;
    Ok((w.linear(g, ctx, &format!("{prefix}/attn/out"))?, probs))
}

/// Output of one residual block, with the attention probabilities for
/// inspection.
pub struct BlockOutput {
    pub out: Var,
    pub attention: Var,
}

/// Pre-norm transformer block on `f [N, J, D]`, attending over joints
/// (`Spatial`) or frames (`Temporal`). The temporal variant permutes to
/// `[J, N, D]` and back around the block.
pub fn mhsa_block(
    g: &mut Graph,
    w: &BoundWeights,
    f: Var,
    axis: Axis,
    prefix: &str,
    cfg: &DenoiserConfig,
    temporal_pos: bool,
) -> Result<BlockOutput> {
    let x = match axis {
        Axis::Spatial => f,
        Axis::Temporal => {
            let p = g.permute(f, &[1, 0, 2])?;
            if temporal_pos {
                g.add(p, w.get("temporal_pos")?)?
            } else {
                p
            }
        }
    };
    let h = w.layer_norm(g, x, &format!("{prefix}/ln1"))?;
    let (a, probs) = self_attention(g, w, h, prefix, cfg.heads)?;
    let x = g.add(x, a)?;
    let h = w.layer_norm(g, x, &format!("{prefix}/ln2"))?;
    let h = w.linear(g, h, &format!("{prefix}/mlp/fc1"))?;
    let h = g.gelu(h);
    let h = w.linear(g, h, &format!("{prefix}/mlp/fc2"))?;
    let x = g.add(x, h)?;
    let out = match axis {
        Axis::Spatial => x,
        Axis::Temporal => g.permute(x, &[1, 0, 2])?,
    };
    if !g.value(out).is_finite() {
        return Err(Error::Divergence(format!("non-finite activations after block {prefix}")));
    }
    Ok(BlockOutput { out, attention: probs })
}

/// Cross-attention from pose tokens (queries) to the 77 prompt rows (keys and
/// values), followed by an output projection and a residual connection.
pub fn prompt_cross_attention(
    g: &mut Graph,
    w: &BoundWeights,
    f: Var,
    prompt_tokens: Var,
    cfg: &DenoiserConfig,
) -> Result<BlockOutput> {
    let s = g.shape(f).to_vec();
    let (n, j, d) = (s[0], s[1], s[2]);
    let ps = g.shape(prompt_tokens).to_vec();
    if ps.len() != 2 || ps[1] != d || d % cfg.heads != 0 {
        return Err(Error::Config(format!(
            "cross-attention: prompt {:?} vs feature width {d} over {} heads",
            ps, cfg.heads
        )));
    }
    let (h, dh, rows) = (cfg.heads, d / cfg.heads, ps[0]);
    let x = w.layer_norm(g, f, "cross/ln")?;
    let q = g.matmul(x, w.get("cross/q/w")?)?;
    let q = g.reshape(q, &[n * j, h, dh])?;
    let q = g.permute(q, &[1, 0, 2])?;
    let k = g.matmul(prompt_tokens, w.get("cross/k/w")?)?;
    let k = g.reshape(k, &[rows, h, dh])?;
    let k = g.permute(k, &[1, 0, 2])?;
    let v = g.matmul(prompt_tokens, w.get("cross/v/w")?)?;
    let v = g.reshape(v, &[rows, h, dh])?;
    let v = g.permute(v, &[1, 0, 2])?;
    let (ctx, probs) = attention(g, q, k, v)?;
    let ctx = g.permute(ctx, &[1, 0, 2])?;
    let ctx = g.reshape(ctx, &[n, j, d])?;
    let o = w.linear(g, ctx, "cross/out")?;
    Ok(BlockOutput { out: g.add(f, o)?, attention: probs })
}

/// `F ⊙ ψ_w(φ(v)) + ψ_b(φ(v))` with `v` broadcast over all tokens.
pub fn pts_stylize(g: &mut Graph, w: &BoundWeights, f: Var, v: Var) -> Result<Var> {
    let phi = w.linear(g, v, "pts/phi")?;
    let scale = w.linear(g, phi, "pts/psi_w")?;
    let shift = w.linear(g, phi, "pts/psi_b")?;
    let y = g.mul(f, scale)?;
    g.add(y, shift)
}

/// The trailing spatial/temporal pairs, with axis permutations in between.
pub fn spatio_temporal_stack(g: &mut Graph, w: &BoundWeights, f: Var, cfg: &DenoiserConfig) -> Result<Var> {
    let mut x = f;
    for i in 0..cfg.spatio_temporal_blocks {
        x = mhsa_block(g, w, x, Axis::Spatial, &format!("st/{i}/spatial"), cfg, false)?.out;
        x = mhsa_block(g, w, x, Axis::Temporal, &format!("st/{i}/temporal"), cfg, false)?.out;
    }
    Ok(x)
}

/// Linear `D → 3` per token.
pub fn decode_head(g: &mut Graph, w: &BoundWeights, f: Var) -> Result<Var> {
    w.linear(g, f, "head")
}

/// Full forward pass inside `g`; returns the predicted clean pose `N×J×3`.
pub fn denoise_in_graph(
    g: &mut Graph,
    w: &BoundWeights,
    cfg: &DenoiserConfig,
    yt: &Tensor,
    x: &Tensor,
    t: usize,
    prompt: Option<PromptVars>,
) -> Result<Var> {
    if yt.shape() != [cfg.frames, cfg.joints, 3] {
        return shape_err(format!(
            "pose {:?} does not match configured {}×{}×3",
            yt.shape(),
            cfg.frames,
            cfg.joints
        ));
    }
    let prompt = if cfg.use_prompt {
        Some(prompt.ok_or_else(|| Error::Config("prompt required by configuration".into()))?)
    } else {
        None
    };
    let t_emb = timestamp_embed(g, w, t, cfg.dim)?;
    let pooled = prompt.map(|p| p.pooled);
    let mut z = embed_input(g, w, yt, x, t_emb, pooled)?;
    let layout = cfg.block_layout();
    let (head, tail) = layout.split_at(cfg.spatial_blocks);
    for (name, axis) in head {
        z = mhsa_block(g, w, z, *axis, name, cfg, false)?.out;
    }
    if cfg.use_fpc {
        z = prompt_cross_attention(g, w, z, prompt.unwrap().tokens, cfg)?.out;
    }
    if cfg.use_pts {
        let v = match pooled {
            Some(p) => g.add(p, t_emb)?,
            None => t_emb,
        };
        z = pts_stylize(g, w, z, v)?;
    }
    // the frame table enters at the first temporal block
    let mut pos_pending = true;
    for (name, axis) in tail {
        let inject = pos_pending && *axis == Axis::Temporal;
        pos_pending &= !inject;
        z = mhsa_block(g, w, z, *axis, name, cfg, inject)?.out;
    }
    decode_head(g, w, z)
}

/// A denoiser bound to weights and a fixed conditioning prompt.
#[derive(Clone, Debug)]
pub struct PromptedDenoiser<'a> {
    pub config: &'a DenoiserConfig,
    pub weights: &'a DenoiserWeights,
    pub prompt: Option<PromptEmbedding>,
}

impl<'a> PromptedDenoiser<'a> {
    pub fn new(config: &'a DenoiserConfig, weights: &'a DenoiserWeights, bank: &PromptBank, action: &str) -> Result<Self> {
        let prompt = if config.use_prompt { Some(bank.assemble(action)?) } else { None };
        Ok(Self { config, weights, prompt })
    }

    /// Predicted clean pose for `(Y_t, X, t)`.
    pub fn denoise(&self, yt: &Tensor, x: &Tensor, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = BoundWeights::bind(&mut g, self.weights, false)?;
        let prompt = match &self.prompt {
            Some(p) => {
                let tokens = g.constant(p.tokens.clone());
                let pooled = g.constant(p.pooled.clone());
                Some(PromptVars { tokens, pooled })
            }
            None => None,
        };
        let out = denoise_in_graph(&mut g, &w, self.config, yt, x, t, prompt)?;
        Ok(g.value(out).clone())
    }
}

/// Binds prompt modifiers (trainable) for an action into `g`.
pub fn bind_prompt(g: &mut Graph, bank: &PromptBank, action: &str, trainable: bool) -> Result<PromptVars> {
    prompt::assemble_in_graph(g, &bank.modifiers, bank.frozen(action)?, &TOKEN_BUDGETS, trainable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{init_modifiers, HashTextEncoder, PromptSpec};

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig { dim: 8, heads: 2, frames: 2, joints: 3, ..Default::default() }
    }

    fn bank(dim: usize) -> PromptBank {
        let mut b = init_modifiers(&PromptSpec::new("walk"), dim, 1).unwrap();
        b.register_action("walk", &HashTextEncoder::new(dim)).unwrap();
        b
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        rng::gaussian_tensor(shape, seed)
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig { dim: 10, heads: 4, ..tiny_cfg() }.validate().is_err());
        assert!(DenoiserConfig { use_prompt: false, ..tiny_cfg() }.validate().is_err());
        tiny_cfg().validate().unwrap();
        let d = DenoiserConfig::default();
        assert_eq!((d.spatial_blocks, d.temporal_blocks, d.spatio_temporal_blocks), (1, 1, 3));
    }

    #[test]
    fn weights_match_config_shapes() {
        let cfg = tiny_cfg();
        let w = DenoiserWeights::init(&cfg, 0).unwrap();
        w.validate(&cfg).unwrap();
        assert_eq!(w.tensors.len(), cfg.parameter_shapes().len());
    }

    #[test]
    fn sinusoid_at_zero_alternates() {
        let s = sinusoidal_embedding(0.0, 8);
        assert_eq!(s.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sinusoid_injective_over_schedule() {
        let codes: Vec<Tensor> = (0..=1000).map(|t| sinusoidal_embedding(t as f64, 64)).collect();
        for a in 0..codes.len() {
            for b in a + 1..codes.len() {
                assert!(codes[a].max_abs_diff(&codes[b]) > 1e-6, "t={a} and t={b} collide");
            }
        }
    }

    #[test]
    fn timestamp_embed_is_pure() {
        let cfg = tiny_cfg();
        let w = DenoiserWeights::init(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let a = timestamp_embed(&mut g, &b, 37, 8).unwrap();
        let c = timestamp_embed(&mut g, &b, 37, 8).unwrap();
        assert_eq!(g.value(a), g.value(c));
    }

    fn zeroed(cfg: &DenoiserConfig, keep: impl Fn(&str) -> bool) -> DenoiserWeights {
        let mut w = DenoiserWeights::init(cfg, 5).unwrap();
        for (name, t) in w.tensors.iter_mut() {
            if !keep(name) {
                *t = Tensor::zeros(t.shape());
            }
        }
        w
    }

    #[test]
    fn embed_input_zero_path_and_shape() {
        let cfg = tiny_cfg();
        let w = zeroed(&cfg, |_| false);
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let t = timestamp_embed(&mut g, &b, 10, 8).unwrap();
        let p = g.constant(Tensor::zeros(&[8]));
        let z = embed_input(&mut g, &b, &rand(&[2, 3, 3], 1), &rand(&[2, 3, 2], 2), t, Some(p)).unwrap();
        assert_eq!(g.shape(z), &[2, 3, 8]);
        assert!(g.value(z).data().iter().all(|v| *v == 0.0));
        assert!(embed_input(&mut g, &b, &rand(&[2, 3, 3], 1), &rand(&[2, 4, 2], 2), t, Some(p)).is_err());
    }

    #[test]
    fn embed_input_pooled_shift_is_uniform() {
        let cfg = tiny_cfg();
        let w = DenoiserWeights::init(&cfg, 5).unwrap();
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let t = timestamp_embed(&mut g, &b, 10, 8).unwrap();
        let pooled = rand(&[8], 9);
        let p1 = g.constant(pooled.clone());
        let p2 = g.constant(pooled.scale(2.0));
        let (y, x) = (rand(&[2, 3, 3], 1), rand(&[2, 3, 2], 2));
        let z1 = embed_input(&mut g, &b, &y, &x, t, Some(p1)).unwrap();
        let z2 = embed_input(&mut g, &b, &y, &x, t, Some(p2)).unwrap();
        let diff = g.value(z2).sub(g.value(z1)).unwrap();
        for tok in diff.data().chunks(8) {
            for (a, e) in tok.iter().zip(pooled.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_normalized() {
        let cfg = DenoiserConfig { dim: 8, heads: 2, frames: 4, joints: 5, ..tiny_cfg() };
        let w = DenoiserWeights::init(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let f = g.constant(rand(&[4, 5, 8], 3));
        for (axis, len) in [(Axis::Spatial, 5), (Axis::Temporal, 4)] {
            let out = mhsa_block(&mut g, &b, f, axis, "spatial/0", &cfg, false).unwrap();
            assert_eq!(g.shape(out.out), &[4, 5, 8]);
            assert_eq!(*g.shape(out.attention).last().unwrap(), len);
            for row in g.value(out.attention).data().chunks(len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn singleton_axis_attention_is_value_path() {
        let cfg = DenoiserConfig { dim: 8, heads: 2, frames: 3, joints: 1, ..tiny_cfg() };
        let w = DenoiserWeights::init(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let fx = rand(&[3, 1, 8], 4);
        let f = g.constant(fx.clone());
        let out = mhsa_block(&mut g, &b, f, Axis::Spatial, "spatial/0", &cfg, false).unwrap();
        assert!(g.value(out.attention).data().iter().all(|v| *v == 1.0));

        // attention output equals out-proj(LN(x)·W_V)
        let h = b.layer_norm(&mut g, f, "spatial/0/ln1").unwrap();
        let v = g.matmul(h, b.get("spatial/0/attn/v/w").unwrap()).unwrap();
        let expect_attn = b.linear(&mut g, v, "spatial/0/attn/out").unwrap();
        let (attn, _) = self_attention(&mut g, &b, h, "spatial/0", 2).unwrap();
        assert!(g.value(attn).max_abs_diff(g.value(expect_attn)) < 1e-12);
    }

    #[test]
    fn identical_tokens_stay_identical() {
        let cfg = DenoiserConfig { dim: 8, heads: 2, frames: 2, joints: 4, ..tiny_cfg() };
        let w = DenoiserWeights::init(&cfg, 7).unwrap();
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let tok = rand(&[8], 1);
        let f = g.constant(Tensor::from_vec(vec![2, 4, 8], tok.data().repeat(8)).unwrap());
        let out = mhsa_block(&mut g, &b, f, Axis::Spatial, "spatial/0", &cfg, false).unwrap();
        let data = g.value(out.out).data().to_vec();
        for t in data.chunks(8) {
            for (a, e) in t.iter().zip(&data[..8]) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_shapes_and_uniform_prompt() {
        let cfg = tiny_cfg();
        let w = DenoiserWeights::init(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let fx = rand(&[2, 3, 8], 5);
        let f = g.constant(fx.clone());
        let row = rand(&[8], 6);
        let p = g.constant(Tensor::from_vec(vec![77, 8], row.data().repeat(77)).unwrap());
        let out = prompt_cross_attention(&mut g, &b, f, p, &cfg).unwrap();
        assert_eq!(g.shape(out.attention), &[2, 6, 77]);
        for r in g.value(out.attention).data().chunks(77) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        // all rows equal: output = residual + out_proj(row·W_V) at every token
        let rv = g.constant(row.reshape(&[1, 8]).unwrap());
        let v = g.matmul(rv, b.get("cross/v/w").unwrap()).unwrap();
        let o = b.linear(&mut g, v, "cross/out").unwrap();
        let o = g.value(o).data().to_vec();
        for (tok, res) in g.value(out.out).data().chunks(8).zip(fx.data().chunks(8)) {
            for i in 0..8 {
                assert!((tok[i] - res[i] - o[i]).abs() < 1e-12);
            }
        }
        let bad = g.constant(Tensor::zeros(&[77, 6]));
        assert!(matches!(prompt_cross_attention(&mut g, &b, f, bad, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn cross_attention_saturates_on_dominant_row() {
        let cfg = DenoiserConfig { heads: 1, ..tiny_cfg() };
        let mut w = DenoiserWeights::init(&cfg, 3).unwrap();
        // identity projections so logits = LN(f)·p_r
        let eye = Tensor::from_vec(vec![8, 8], (0..64).map(|i| if i % 9 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        for n in ["cross/q/w", "cross/k/w"] {
            w.tensors.insert(n.into(), eye.clone());
        }
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let fx = Tensor::from_vec(vec![2, 3, 8], [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0].repeat(6)).unwrap();
        let f = g.constant(fx.clone());
        let mut pdata = vec![0.0; 77 * 8];
        for i in 0..8 {
            pdata[40 * 8 + i] = if i % 2 == 0 { 500.0 } else { -500.0 };
        }
        let p = g.constant(Tensor::from_vec(vec![77, 8], pdata.clone()).unwrap());
        let out = prompt_cross_attention(&mut g, &b, f, p, &cfg).unwrap();
        let rv = g.constant(Tensor::from_vec(vec![1, 8], pdata[320..328].to_vec()).unwrap());
        let v = g.matmul(rv, b.get("cross/v/w").unwrap()).unwrap();
        let o = b.linear(&mut g, v, "cross/out").unwrap();
        let o = g.value(o).data().to_vec();
        for (tok, res) in g.value(out.out).data().chunks(8).zip(fx.data().chunks(8)) {
            for i in 0..8 {
                assert!((tok[i] - res[i] - o[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pts_identity_and_zero_scale() {
        let cfg = tiny_cfg();
        let mut w = zeroed(&cfg, |_| true);
        for n in ["pts/psi_w/w", "pts/psi_b/w", "pts/psi_b/b"] {
            let s = w.tensors[n].shape().to_vec();
            w.tensors.insert(n.into(), Tensor::zeros(&s));
        }
        w.tensors.insert("pts/psi_w/b".into(), Tensor::ones(&[8]));
        let fx = rand(&[2, 3, 8], 2);
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let f = g.constant(fx.clone());
        let v = g.constant(rand(&[8], 3));
        let out = pts_stylize(&mut g, &b, f, v).unwrap();
        assert!(g.value(out).max_abs_diff(&fx) < 1e-15);

        w.tensors.insert("pts/psi_w/b".into(), Tensor::zeros(&[8]));
        w.tensors.insert("pts/psi_b/b".into(), rand(&[8], 8));
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let f = g.constant(fx);
        let v = g.constant(rand(&[8], 3));
        let out = pts_stylize(&mut g, &b, f, v).unwrap();
        let shift = rand(&[8], 8);
        for tok in g.value(out).data().chunks(8) {
            assert_eq!(tok, shift.data());
        }
    }

    #[test]
    fn pts_depends_on_timestamp() {
        let cfg = tiny_cfg();
        let w = DenoiserWeights::init(&cfg, 4).unwrap();
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let f = g.constant(rand(&[2, 3, 8], 2));
        let pooled = g.constant(rand(&[8], 1));
        let mut outs = Vec::new();
        for t in [10, 600] {
            let te = timestamp_embed(&mut g, &b, t, 8).unwrap();
            let v = g.add(pooled, te).unwrap();
            outs.push(pts_stylize(&mut g, &b, f, v).unwrap());
        }
        assert!(g.value(outs[0]).max_abs_diff(g.value(outs[1])) > 1e-6);
    }

    #[test]
    fn zero_residual_branches_make_stack_identity() {
        let cfg = DenoiserConfig { frames: 3, joints: 4, ..tiny_cfg() };
        let w = zeroed(&cfg, |n| !(n.contains("/attn/out/") || n.contains("/mlp/fc2/")));
        let fx = rand(&[3, 4, 8], 9);
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let f = g.constant(fx.clone());
        let out = spatio_temporal_stack(&mut g, &b, f, &cfg).unwrap();
        assert_eq!(g.shape(out), &[3, 4, 8]);
        assert_eq!(g.value(out), &fx);
        // permuting there and back is exact
        let p = g.permute(f, &[1, 0, 2]).unwrap();
        let back = g.permute(p, &[1, 0, 2]).unwrap();
        assert_eq!(g.value(back), &fx);
    }

    #[test]
    fn decode_head_examples() {
        let cfg = DenoiserConfig { frames: 4, joints: 5, ..tiny_cfg() };
        let mut w = zeroed(&cfg, |_| false);
        let fx = rand(&[4, 5, 8], 1);
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let f = g.constant(fx.clone());
        let out = decode_head(&mut g, &b, f).unwrap();
        assert_eq!(g.shape(out), &[4, 5, 3]);
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));

        let mut eye = vec![0.0; 24];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        w.tensors.insert("head/w".into(), Tensor::from_vec(vec![8, 3], eye).unwrap());
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w, false).unwrap();
        let f = g.constant(fx.clone());
        let out = decode_head(&mut g, &b, f).unwrap();
        for (o, t) in g.value(out).data().chunks(3).zip(fx.data().chunks(8)) {
            assert_eq!(o, &t[..3]);
        }
    }

    #[test]
    fn denoise_is_deterministic_with_pose_shape() {
        let cfg = tiny_cfg();
        let w = DenoiserWeights::init(&cfg, 1).unwrap();
        let b = bank(8);
        let d = PromptedDenoiser::new(&cfg, &w, &b, "walk").unwrap();
        let (y, x) = (rand(&[2, 3, 3], 1), rand(&[2, 3, 2], 2));
        let a = d.denoise(&y, &x, 500).unwrap();
        let c = d.denoise(&y, &x, 500).unwrap();
        assert_eq!(a.shape(), &[2, 3, 3]);
        assert_eq!(a.bits(), c.bits());
    }

    #[test]
    fn output_responds_to_every_modifier_block() {
        let cfg = tiny_cfg();
        let w = DenoiserWeights::init(&cfg, 1).unwrap();
        let base = bank(8);
        let (y, x) = (rand(&[2, 3, 3], 1), rand(&[2, 3, 2], 2));
        let reference = PromptedDenoiser::new(&cfg, &w, &base, "walk").unwrap().denoise(&y, &x, 300).unwrap();
        for k in 0..7 {
            let mut b = base.clone();
            b.modifiers[k].data_mut()[0] += 0.5;
            let out = PromptedDenoiser::new(&cfg, &w, &b, "walk").unwrap().denoise(&y, &x, 300).unwrap();
            assert!(out.max_abs_diff(&reference) > 1e-9, "modifier block {k} has no effect");
        }
    }

    #[test]
    fn ablations_drop_their_parameters() {
        let no_prompt = DenoiserConfig { use_prompt: false, use_fpc: false, use_pts: false, ..tiny_cfg() };
        let shapes = no_prompt.parameter_shapes();
        assert!(!shapes.keys().any(|k| k.starts_with("cross/") || k.starts_with("pts/")));
        let w = DenoiserWeights::init(&no_prompt, 0).unwrap();
        let d = PromptedDenoiser { config: &no_prompt, weights: &w, prompt: None };
        assert_eq!(d.denoise(&rand(&[2, 3, 3], 1), &rand(&[2, 3, 2], 2), 5).unwrap().shape(), &[2, 3, 3]);
    }

    fn fd_loss(cfg: &DenoiserConfig, w: &DenoiserWeights, b: &PromptBank, y: &Tensor, x: &Tensor, target: &Tensor) -> f64 {
        let out = PromptedDenoiser::new(cfg, w, b, "walk").unwrap().denoise(y, x, 123).unwrap();
        out.sub(target).unwrap().data().iter().map(|v| v * v).sum::<f64>() / out.numel() as f64
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let w = DenoiserWeights::init(&cfg, 11).unwrap();
        let b = bank(8);
        let (y, x, target) = (rand(&[2, 3, 3], 1), rand(&[2, 3, 2], 2), rand(&[2, 3, 3], 3));

        let mut g = Graph::new();
        let bw = BoundWeights::bind(&mut g, &w, true).unwrap();
        let pv = bind_prompt(&mut g, &b, "walk", true).unwrap();
        let out = denoise_in_graph(&mut g, &bw, &cfg, &y, &x, 123, Some(pv)).unwrap();
        let tv = g.constant(target.clone());
        let diff = g.sub(out, tv).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        let loss = g.mean(sq);
        assert!((g.value(loss).item() - fd_loss(&cfg, &w, &b, &y, &x, &target)).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();

        let h = 1e-5;
        let names = [
            "input/proj/w", "temporal_pos", "time/fc1/w", "spatial/0/attn/q/w", "spatial/0/ln1/g",
            "cross/k/w", "cross/out/b", "pts/psi_w/w", "pts/phi/b", "temporal/0/mlp/fc1/w",
            "st/2/temporal/attn/v/w", "head/w",
        ];
        for name in names {
            let ana = grads.param(name).unwrap();
            for idx in [0, w.tensors[name].numel() / 2, w.tensors[name].numel() - 1] {
                let mut wp = w.clone();
                wp.tensors.get_mut(name).unwrap().data_mut()[idx] += h;
                let mut wm = w.clone();
                wm.tensors.get_mut(name).unwrap().data_mut()[idx] -= h;
                let num = (fd_loss(&cfg, &wp, &b, &y, &x, &target) - fd_loss(&cfg, &wm, &b, &y, &x, &target)) / (2.0 * h);
                let a = ana.data()[idx];
                assert!((a - num).abs() <= 1e-6 + 1e-4 * num.abs(), "{name}[{idx}]: analytic {a} vs numeric {num}");
            }
        }
        for k in [0, 3, 6] {
            let name = prompt::modifier_name(k);
            let ana = grads.param(&name).unwrap();
            for idx in [0, 5] {
                let mut bp = b.clone();
                bp.modifiers[k].data_mut()[idx] += h;
                let mut bm = b.clone();
                bm.modifiers[k].data_mut()[idx] -= h;
                let num = (fd_loss(&cfg, &w, &bp, &y, &x, &target) - fd_loss(&cfg, &w, &bm, &y, &x, &target)) / (2.0 * h);
                let a = ana.data()[idx];
                assert!((a - num).abs() <= 1e-6 + 1e-4 * num.abs(), "{name}[{idx}]: analytic {a} vs numeric {num}");
            }
        }
    }
}
