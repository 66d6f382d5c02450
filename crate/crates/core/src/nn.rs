//! Shared building blocks: the per-pass [`Forward`] context that binds
//! parameters onto a tape, parameter initialization, and the attention and
//! feed-forward layers used by both the ViT backbone and the fusion stack.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, Error, Result};
use crate::tensor::{Gradients, ParamStore, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const GEM_EPS: f64 = 1e-6;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;
pub const GEM_P_INIT: f64 = 3.0;

/// Which backbone a feature came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Cnn,
    Vit,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Cnn => "c",
            Branch::Vit => "t",
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Cnn => Branch::Vit,
            Branch::Vit => Branch::Cnn,
        }
    }
}

/// Attention unit kind, used to label captured attention maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Seu,
    Mfu,
}

impl Unit {
    pub fn tag(self) -> &'static str {
        match self {
            Unit::Seu => "seu",
            Unit::Mfu => "mfu",
        }
    }
}

/// Attention weights of one unit call, `[B, heads, T_query, T_key]`.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    pub branch: Branch,
    pub unit: Unit,
    pub weights: Tensor,
}

/// Per-pass context: the tape, the parameter store, and train/eval mode.
///
/// Each parameter path is bound to exactly one tape leaf per pass, so a
/// tensor used by several calls (a shared SEU, say) accumulates all of its
/// gradient contributions in one place.
pub struct Forward<'t, 's> {
    tape: &'t Tape,
    store: &'s mut ParamStore,
    bound: HashMap<String, Var<'t>>,
    training: bool,
    track_grads: bool,
    capture: Option<Vec<AttentionRecord>>,
}

impl<'t, 's> Forward<'t, 's> {
    /// Training-mode pass that records gradients for every parameter.
    pub fn train(tape: &'t Tape, store: &'s mut ParamStore) -> Self {
        Self::new(tape, store, true, true)
    }

    /// Evaluation-mode pass (running batch-norm statistics, no gradients).
    pub fn eval(tape: &'t Tape, store: &'s mut ParamStore) -> Self {
        Self::new(tape, store, false, false)
    }

    pub fn new(tape: &'t Tape, store: &'s mut ParamStore, training: bool, track_grads: bool) -> Self {
        Self {
            tape,
            store,
            bound: HashMap::new(),
            training,
            track_grads,
            capture: None,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape leaf for parameter `path`, bound once per pass.
    pub fn param(&mut self, path: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.get(path) {
            return Ok(*v);
        }
        let value = self.store.value(path)?.clone();
        let v = self.tape.leaf(value, self.track_grads);
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    /// Paths bound so far, with their tape leaves.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn enable_capture(&mut self) {
        self.capture = Some(Vec::new());
    }

    pub fn capturing(&self) -> bool {
        self.capture.is_some()
    }

    pub fn record_attention(&mut self, layer: usize, branch: Branch, unit: Unit, weights: Var<'t>) {
        if let Some(records) = &mut self.capture {
            records.push(AttentionRecord {
                layer,
                branch,
                unit,
                weights: (*weights.value()).clone(),
            });
        }
    }

    pub fn take_captures(&mut self) -> Vec<AttentionRecord> {
        self.capture.take().unwrap_or_default()
    }

    /// Write gradients of every bound parameter into the store. Parameters
    /// the loss does not reach receive zeros.
    pub fn store_grads(&mut self, grads: &Gradients) {
        for (path, var) in &self.bound {
            if let Some(p) = self.store.get_mut(path) {
                p.grad = Some(grads.get_or_zeros(*var));
            }
        }
    }

    /// Batch normalization with parameters and running statistics under
    /// `prefix`. Training mode normalizes with batch statistics and updates
    /// the running estimates.
    pub fn batch_norm(&mut self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean_path = format!("{prefix}.running_mean");
        let var_path = format!("{prefix}.running_var");
        if self.training {
            let (y, stats) = x.batch_norm(gamma, beta, None, NORM_EPS)?;
            let stats = stats.expect("training batch norm returns statistics");
            let blend = |buf: &mut Tensor, batch: &[f64]| {
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            };
            blend(self.store.buffer_mut(&mean_path)?, &stats.mean);
            blend(self.store.buffer_mut(&var_path)?, &stats.var);
            Ok(y)
        } else {
            let mean = self.store.buffer(&mean_path)?.data().to_vec();
            let var = self.store.buffer(&var_path)?.data().to_vec();
            Ok(x.batch_norm(gamma, beta, Some((&mean, &var)), NORM_EPS)?.0)
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        x.layer_norm(gamma, beta, NORM_EPS)
    }

    pub fn linear(&mut self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias_path = format!("{prefix}.bias");
        let b = if self.store.get(&bias_path).is_some() {
            Some(self.param(&bias_path)?)
        } else {
            None
        };
        x.linear(w, b)
    }
}

/// Registers parameters with deterministic initial values.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Normal samples truncated to two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(self.rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor::new(shape, data).expect("shape matches sample count")
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                z * std
            })
            .collect();
        Tensor::new(shape, data).expect("shape matches sample count")
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape, data).expect("shape matches sample count")
    }

    pub fn param(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        self.store.insert(path, value)
    }

    /// `weight: [in, out]` (truncated normal, std 0.02) plus optional zero bias.
    pub fn linear(&mut self, prefix: &str, input: usize, output: usize, bias: bool) -> Result<()> {
        let w = self.trunc_normal(&[input, output], 0.02);
        self.param(format!("{prefix}.weight"), w)?;
        if bias {
            self.param(format!("{prefix}.bias"), Tensor::zeros(&[output]))?;
        }
        Ok(())
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.param(format!("{prefix}.gamma"), Tensor::ones(&[dim]))?;
        self.param(format!("{prefix}.beta"), Tensor::zeros(&[dim]))
    }

    pub fn batch_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.param(format!("{prefix}.gamma"), Tensor::ones(&[channels]))?;
        self.param(format!("{prefix}.beta"), Tensor::zeros(&[channels]))?;
        self.store
            .insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]))?;
        self.store
            .insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[channels]))
    }

    /// Conv kernel `[out, in_per_group, k, k]` with Kaiming-normal (fan-out)
    /// initialization.
    pub fn conv(&mut self, path: &str, out: usize, in_per_group: usize, kh: usize, kw: usize) -> Result<()> {
        let fan_out = (out * kh * kw) as f64;
        let w = self.normal(&[out, in_per_group, kh, kw], (2.0 / fan_out).sqrt());
        self.param(path, w)
    }
}

/// `[B, T, D] -> [B, H, T, D/H]`.
pub fn split_heads<'t>(x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    x.reshape(&[b, t, heads, d / heads])?.permute(&[0, 2, 1, 3])
}

/// `[B, H, T, d] -> [B, T, H·d]`.
pub fn merge_heads(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3])?.reshape(&[b, t, h * d])
}

/// Scaled dot-product attention on per-head tensors `[B, H, T, d]`.
/// Returns the attended values and the attention weights `[B, H, T_q, T_k]`.
pub fn attend<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let d = *q.shape().last().expect("per-head tensors are 4-D");
    if k.shape()[2] == 0 {
        return Err(Error::Data("attention over an empty key set".into()));
    }
    let scores = q.matmul(k.transpose(2, 3)?)?.scale(1.0 / (d as f64).sqrt());
    let weights = scores.softmax();
    Ok((weights.matmul(v)?, weights))
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(cfg_err!(
            "embedding dimension {dim} is not divisible by {heads} heads"
        ));
    }
    Ok(())
}

/// Multi-head self-attention with q/k/v/proj linear maps under `prefix`.
pub struct SelfAttention {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
}

impl SelfAttention {
    pub fn init(&self, init: &mut Init<'_>) -> Result<()> {
        check_heads(self.dim, self.heads)?;
        for name in ["q", "k", "v", "proj"] {
            init.linear(&format!("{}.{name}", self.prefix), self.dim, self.dim, true)?;
        }
        Ok(())
    }

    /// `x: [B, T, D]` to `([B, T, D], weights [B, H, T, T])`.
    pub fn forward<'t>(&self, fwd: &mut Forward<'t, '_>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        check_heads(self.dim, self.heads)?;
        let p = &self.prefix;
        let q = split_heads(fwd.linear(&format!("{p}.q"), x)?, self.heads)?;
        let k = split_heads(fwd.linear(&format!("{p}.k"), x)?, self.heads)?;
        let v = split_heads(fwd.linear(&format!("{p}.v"), x)?, self.heads)?;
        let (out, weights) = attend(q, k, v)?;
        let out = fwd.linear(&format!("{p}.proj"), merge_heads(out)?)?;
        Ok((out, weights))
    }

    pub fn num_params(dim: usize) -> usize {
        4 * (dim * dim + dim)
    }
}

/// Two linear maps with a GELU in between.
pub struct FeedForward {
    pub prefix: String,
    pub dim: usize,
    pub hidden: usize,
}

impl FeedForward {
    pub fn init(&self, init: &mut Init<'_>) -> Result<()> {
        init.linear(&format!("{}.fc1", self.prefix), self.dim, self.hidden, true)?;
        init.linear(&format!("{}.fc2", self.prefix), self.hidden, self.dim, true)
    }

    pub fn forward<'t>(&self, fwd: &mut Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = fwd.linear(&format!("{}.fc1", self.prefix), x)?.gelu();
        fwd.linear(&format!("{}.fc2", self.prefix), h)
    }

    pub fn num_params(dim: usize, hidden: usize) -> usize {
        dim * hidden + hidden + hidden * dim + dim
    }
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
pub struct TransformerBlock {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl TransformerBlock {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            dim,
            heads,
            hidden,
        }
    }

    fn attention(&self) -> SelfAttention {
        SelfAttention {
            prefix: format!("{}.attn", self.prefix),
            dim: self.dim,
            heads: self.heads,
        }
    }

    fn mlp(&self) -> FeedForward {
        FeedForward {
            prefix: format!("{}.mlp", self.prefix),
            dim: self.dim,
            hidden: self.hidden,
        }
    }

    pub fn init(&self, init: &mut Init<'_>) -> Result<()> {
        init.layer_norm(&format!("{}.norm1", self.prefix), self.dim)?;
        self.attention().init(init)?;
        init.layer_norm(&format!("{}.norm2", self.prefix), self.dim)?;
        self.mlp().init(init)
    }

    /// `x: [B, T, D]`; returns the block output and the attention weights.
    pub fn forward<'t>(&self, fwd: &mut Forward<'t, '_>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = fwd.layer_norm(&format!("{}.norm1", self.prefix), x)?;
        let (attn, weights) = self.attention().forward(fwd, h)?;
        let x = x.add(attn)?;
        let h = fwd.layer_norm(&format!("{}.norm2", self.prefix), x)?;
        let x = x.add(self.mlp().forward(fwd, h)?)?;
        Ok((x, weights))
    }

    pub fn num_params(dim: usize, hidden: usize) -> usize {
        2 * 2 * dim + SelfAttention::num_params(dim) + FeedForward::num_params(dim, hidden)
    }
}

/// Pooling used to turn maps into global vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Generalized mean with a learnable exponent.
    #[default]
    Gem,
    /// Plain average (GeM with a fixed exponent of 1).
    Average,
}

/// GeM (learnable exponent at `p_path`) or average pooling of `[B, C, ...]`.
pub fn pool<'t>(fwd: &mut Forward<'t, '_>, p_path: &str, pooling: Pooling, x: Var<'t>) -> Result<Var<'t>> {
    let p = match pooling {
        Pooling::Gem => fwd.param(p_path)?,
        Pooling::Average => fwd.tape().constant(Tensor::vector(&[1.0])),
    };
    x.gem_pool(p, GEM_EPS)
}
