//! Dual-attention mutual fusion.
//!
//! Both backbone maps are first aligned to a common `(D, H, W)` by a local
//! refinement unit (depthwise conv, BN, PReLU, pointwise conv, BN, PReLU).
//! A stack of `L` transmission modules then evolves one global token per
//! branch. At every layer each branch's global token is re-attached to the
//! *initial* refined local tokens of its own branch and encoded by a
//! self-attention unit (SEU); each branch's encoded global token then
//! queries the other branch's encoded locals through a cross-attention unit
//! (MFU). The local tokens are never overwritten between layers.

use serde::{Deserialize, Serialize};

use crate::backbones::BranchOutput;
use crate::error::{cfg_err, Result};
use crate::nn::{
    attend, check_heads, merge_heads, pool, split_heads, Branch, FeedForward, Forward, Init,
    TransformerBlock, Unit, GEM_P_INIT, PRELU_INIT,
};

pub use crate::nn::Pooling;
use crate::tensor::{ConvMode, Tensor, Var};

/// Arrangement of units inside each transmission module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// SEU in front, MFUs in back.
    #[default]
    SeuThenMfu,
    /// Only SEUs are stacked.
    SeuOnly,
    /// MFUs in front, SEU in back.
    MfuThenSeu,
    /// Only MFUs are stacked.
    MfuOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::SeuThenMfu,
        Variant::SeuOnly,
        Variant::MfuThenSeu,
        Variant::MfuOnly,
    ];

    pub fn has_seu(self) -> bool {
        self != Variant::MfuOnly
    }

    pub fn has_mfu(self) -> bool {
        self != Variant::SeuOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::SeuThenMfu => "seu_then_mfu",
            Variant::SeuOnly => "seu_only",
            Variant::MfuThenSeu => "mfu_then_seu",
            Variant::MfuOnly => "mfu_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmfConfig {
    /// Fused channel dimension `D`.
    pub dim: usize,
    /// Common grid `(H, W)` both branches are refined to.
    pub grid: (usize, usize),
    pub heads: usize,
    pub layers: usize,
    pub seu_shared: bool,
    pub mfu_shared: bool,
    pub variant: Variant,
    pub ffn_ratio: usize,
    /// Depthwise kernel size in the refinement units (odd).
    pub lru_kernel: usize,
}

impl Default for DmfConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            grid: (4, 2),
            heads: 4,
            layers: 2,
            seu_shared: true,
            mfu_shared: false,
            variant: Variant::SeuThenMfu,
            ffn_ratio: 4,
            lru_kernel: 3,
        }
    }
}

impl DmfConfig {
    /// Head count `D / 64` (at least one), the full-scale convention.
    pub fn with_default_heads(mut self) -> Self {
        self.heads = (self.dim / 64).max(1);
        self
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.ffn_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(cfg_err!("dmf.dim must be positive"));
        }
        check_heads(self.dim, self.heads)?;
        if self.layers == 0 {
            return Err(cfg_err!("dmf.layers must be at least 1"));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(cfg_err!("dmf.grid must be non-empty"));
        }
        if self.lru_kernel == 0 || self.lru_kernel % 2 == 0 {
            return Err(cfg_err!("dmf.lru_kernel must be odd"));
        }
        if self.ffn_ratio == 0 {
            return Err(cfg_err!("dmf.ffn_ratio must be positive"));
        }
        Ok(())
    }
}

/// Local refinement unit for one branch.
pub struct Lru {
    pub prefix: String,
    pub in_dim: usize,
    pub dim: usize,
    pub in_grid: (usize, usize),
    pub grid: (usize, usize),
    pub kernel: usize,
    pub pooling: Pooling,
}

impl Lru {
    /// Depthwise stride mapping `in_grid` onto `grid`.
    pub fn stride(&self) -> Result<usize> {
        let (hi, wi) = self.in_grid;
        let (ho, wo) = self.grid;
        if ho == 0 || wo == 0 || hi % ho != 0 || wi % wo != 0 || hi / ho != wi / wo {
            return Err(cfg_err!(
                "{}: grid {hi}×{wi} cannot be mapped to {ho}×{wo} by one depthwise stride",
                self.prefix
            ));
        }
        Ok(hi / ho)
    }

    pub fn init(&self, init: &mut Init<'_>) -> Result<()> {
        self.stride()?;
        let p = &self.prefix;
        let k = self.kernel;
        init.conv(&format!("{p}.dw.weight"), self.in_dim, 1, k, k)?;
        init.batch_norm(&format!("{p}.dw_bn"), self.in_dim)?;
        init.param(format!("{p}.dw_prelu"), Tensor::full(&[self.in_dim], PRELU_INIT))?;
        init.conv(&format!("{p}.pw.weight"), self.dim, self.in_dim, 1, 1)?;
        init.batch_norm(&format!("{p}.pw_bn"), self.dim)?;
        init.param(format!("{p}.pw_prelu"), Tensor::full(&[self.dim], PRELU_INIT))?;
        if self.pooling == Pooling::Gem {
            init.param(format!("{p}.gem_p"), Tensor::vector(&[GEM_P_INIT]))?;
        }
        Ok(())
    }

    /// `map: [B, D_in, H_in, W_in]` to the refined map `[B, D, H, W]` and
    /// its pooled global token `[B, D]`.
    pub fn forward<'t>(&self, fwd: &mut Forward<'t, '_>, map: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let s = map.shape();
        if s.len() != 4 || s[1] != self.in_dim || (s[2], s[3]) != self.in_grid {
            return Err(cfg_err!(
                "{}: expected input [B, {}, {}, {}], got {s:?}",
                self.prefix,
                self.in_dim,
                self.in_grid.0,
                self.in_grid.1
            ));
        }
        let stride = self.stride()?;
        let p = &self.prefix;
        let dw = fwd.param(&format!("{p}.dw.weight"))?;
        let x = map.convolve(dw, None, ConvMode::Depthwise, stride, self.kernel / 2)?;
        let x = fwd.batch_norm(&format!("{p}.dw_bn"), x)?;
        let x = x.prelu(fwd.param(&format!("{p}.dw_prelu"))?)?;
        let pw = fwd.param(&format!("{p}.pw.weight"))?;
        let x = x.convolve(pw, None, ConvMode::Pointwise, 1, 0)?;
        let x = fwd.batch_norm(&format!("{p}.pw_bn"), x)?;
        let x = x.prelu(fwd.param(&format!("{p}.pw_prelu"))?)?;
        let global = pool(fwd, &format!("{p}.gem_p"), self.pooling, x)?;
        Ok((x, global))
    }

    pub fn num_params(in_dim: usize, dim: usize, kernel: usize, pooling: Pooling) -> usize {
        in_dim * kernel * kernel + 2 * in_dim + in_dim + dim * in_dim + 2 * dim + dim
            + usize::from(pooling == Pooling::Gem)
    }
}

/// Self-attention encoder over `[global; locals]`.
pub struct Seu {
    block: TransformerBlock,
}

impl Seu {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            block: TransformerBlock::new(prefix, dim, heads, hidden),
        }
    }

    pub fn init(&self, init: &mut Init<'_>) -> Result<()> {
        self.block.init(init)
    }

    /// `global: [B, D]`, `locals: [B, HW, D]`. Returns `S^g: [B, D]`,
    /// `S^l: [B, HW, D]` and the attention weights `[B, H, 1+HW, 1+HW]`.
    pub fn forward<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        global: Var<'t>,
        locals: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        check_heads(self.block.dim, self.block.heads)?;
        let gs = global.shape();
        let seq = Var::concat(&[global.reshape(&[gs[0], 1, gs[1]])?, locals], 1)?;
        let (out, weights) = self.block.forward(fwd, seq)?;
        let (sg, sl) = out.split_at(1, 1)?;
        Ok((sg.reshape(&gs)?, sl, weights))
    }

    pub fn num_params(dim: usize, hidden: usize) -> usize {
        TransformerBlock::num_params(dim, hidden)
    }
}

/// Multi-head cross-attention of one query token over `kv_tokens`.
///
/// `query: [B, D]`, `kv_tokens: [B, HW, D]`; q/k/v linear maps live under
/// `prefix`. Returns the concatenated head outputs `[B, D]` (no output
/// projection) and the weights `[B, H, 1, HW]`.
pub fn mhca<'t>(
    fwd: &mut Forward<'t, '_>,
    prefix: &str,
    query: Var<'t>,
    kv_tokens: Var<'t>,
    heads: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let qs = query.shape();
    let (b, d) = (qs[0], qs[1]);
    check_heads(d, heads)?;
    let q = fwd.linear(&format!("{prefix}.q"), query.reshape(&[b, 1, d])?)?;
    let k = fwd.linear(&format!("{prefix}.k"), kv_tokens)?;
    let v = fwd.linear(&format!("{prefix}.v"), kv_tokens)?;
    let (out, weights) = attend(
        split_heads(q, heads)?,
        split_heads(k, heads)?,
        split_heads(v, heads)?,
    )?;
    Ok((merge_heads(out)?.reshape(&[b, d])?, weights))
}

/// Cross-attention fusion unit: `f' = FFN(M) + M` with `M = MHCA(..)`.
pub struct Mfu {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Mfu {
    fn ffn(&self) -> FeedForward {
        FeedForward {
            prefix: format!("{}.ffn", self.prefix),
            dim: self.dim,
            hidden: self.hidden,
        }
    }

    pub fn init(&self, init: &mut Init<'_>) -> Result<()> {
        check_heads(self.dim, self.heads)?;
        for name in ["q", "k", "v"] {
            init.linear(&format!("{}.{name}", self.prefix), self.dim, self.dim, true)?;
        }
        self.ffn().init(init)
    }

    /// `own_global: [B, D]` queries `other_locals: [B, HW, D]`.
    pub fn forward<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        own_global: Var<'t>,
        other_locals: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (m, weights) = mhca(fwd, &self.prefix, own_global, other_locals, self.heads)?;
        let out = self.ffn().forward(fwd, m)?.add(m)?;
        Ok((out, weights))
    }

    pub fn num_params(dim: usize, hidden: usize) -> usize {
        3 * (dim * dim + dim) + FeedForward::num_params(dim, hidden)
    }
}

/// Aligned branch features produced by the refinement units.
#[derive(Clone, Copy, Debug)]
pub struct RefinedPair<'t> {
    /// `F_c: [B, D, H, W]`
    pub map_c: Var<'t>,
    /// `F_t: [B, D, H, W]`
    pub map_t: Var<'t>,
    /// `f'_(c,0): [B, D]`
    pub global_c: Var<'t>,
    /// `f'_(t,0): [B, D]`
    pub global_t: Var<'t>,
    /// Flattened `F_c` as tokens `[B, HW, D]`, reused by every layer.
    pub locals_c: Var<'t>,
    /// Flattened `F_t` as tokens `[B, HW, D]`, reused by every layer.
    pub locals_t: Var<'t>,
}

impl<'t> RefinedPair<'t> {
    pub fn new(map_c: Var<'t>, map_t: Var<'t>, global_c: Var<'t>, global_t: Var<'t>) -> Result<Self> {
        let tokens = |m: Var<'t>| -> Result<Var<'t>> { m.flatten_spatial()?.permute(&[0, 2, 1]) };
        Ok(Self {
            map_c,
            map_t,
            global_c,
            global_t,
            locals_c: tokens(map_c)?,
            locals_t: tokens(map_t)?,
        })
    }

    pub fn locals(&self, branch: Branch) -> Var<'t> {
        match branch {
            Branch::Cnn => self.locals_c,
            Branch::Vit => self.locals_t,
        }
    }

    pub fn initial_state(&self) -> HtmState<'t> {
        HtmState {
            layer: 0,
            global_c: self.global_c,
            global_t: self.global_t,
        }
    }
}

/// Global tokens after `layer` transmission modules.
#[derive(Clone, Copy, Debug)]
pub struct HtmState<'t> {
    pub layer: usize,
    pub global_c: Var<'t>,
    pub global_t: Var<'t>,
}

impl<'t> HtmState<'t> {
    pub fn global(&self, branch: Branch) -> Var<'t> {
        match branch {
            Branch::Cnn => self.global_c,
            Branch::Vit => self.global_t,
        }
    }
}

/// Result of the fusion stack.
#[derive(Clone, Debug)]
pub struct DmfOutput<'t> {
    pub refined: RefinedPair<'t>,
    /// States for `k = 0..=L`.
    pub states: Vec<HtmState<'t>>,
}

impl<'t> DmfOutput<'t> {
    pub fn final_state(&self) -> HtmState<'t> {
        *self.states.last().expect("at least the initial state")
    }
}

/// Exact parameter counts of the fusion module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmfParamCounts {
    pub lru_c: usize,
    pub lru_t: usize,
    pub seu_per_layer: usize,
    pub mfu_per_layer: usize,
    /// All transmission modules (SEUs and MFUs of every layer).
    pub htm_stack: usize,
    pub total: usize,
}

/// The full fusion module for given backbone output shapes.
pub struct Dmf {
    pub cfg: DmfConfig,
    pub prefix: String,
    pub cnn_dim: usize,
    pub cnn_grid: (usize, usize),
    pub vit_dim: usize,
    pub vit_grid: (usize, usize),
    pub pooling: Pooling,
}

impl Dmf {
    pub fn lru(&self, branch: Branch) -> Lru {
        let (in_dim, in_grid) = match branch {
            Branch::Cnn => (self.cnn_dim, self.cnn_grid),
            Branch::Vit => (self.vit_dim, self.vit_grid),
        };
        Lru {
            prefix: format!("{}.lru_{}", self.prefix, branch.tag()),
            in_dim,
            dim: self.cfg.dim,
            in_grid,
            grid: self.cfg.grid,
            kernel: self.cfg.lru_kernel,
            pooling: self.pooling,
        }
    }

    /// SEU serving `branch` at `layer`; the same unit for both branches when
    /// SEU sharing is on.
    pub fn seu(&self, layer: usize, branch: Branch) -> Seu {
        let name = if self.cfg.seu_shared {
            "seu".to_string()
        } else {
            format!("seu_{}", branch.tag())
        };
        Seu::new(
            format!("{}.layer{layer}.{name}", self.prefix),
            self.cfg.dim,
            self.cfg.heads,
            self.cfg.hidden(),
        )
    }

    pub fn mfu(&self, layer: usize, branch: Branch) -> Mfu {
        let name = if self.cfg.mfu_shared {
            "mfu".to_string()
        } else {
            format!("mfu_{}", branch.tag())
        };
        Mfu {
            prefix: format!("{}.layer{layer}.{name}", self.prefix),
            dim: self.cfg.dim,
            heads: self.cfg.heads,
            hidden: self.cfg.hidden(),
        }
    }

    fn distinct_branches(shared: bool) -> &'static [Branch] {
        if shared {
            &[Branch::Cnn]
        } else {
            &[Branch::Cnn, Branch::Vit]
        }
    }

    pub fn init(&self, init: &mut Init<'_>) -> Result<()> {
        self.cfg.validate()?;
        self.lru(Branch::Cnn).init(init)?;
        self.lru(Branch::Vit).init(init)?;
        for layer in 0..self.cfg.layers {
            if self.cfg.variant.has_seu() {
                for &b in Self::distinct_branches(self.cfg.seu_shared) {
                    self.seu(layer, b).init(init)?;
                }
            }
            if self.cfg.variant.has_mfu() {
                for &b in Self::distinct_branches(self.cfg.mfu_shared) {
                    self.mfu(layer, b).init(init)?;
                }
            }
        }
        Ok(())
    }

    /// Aligns both branches. The ViT map `[B, D_t, N]` is reshaped onto its
    /// patch grid first.
    pub fn refine<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        cnn: &BranchOutput<'t>,
        vit: &BranchOutput<'t>,
    ) -> Result<RefinedPair<'t>> {
        let ts = vit.feature_map.shape();
        let vit_map = vit
            .feature_map
            .reshape(&[ts[0], ts[1], vit.grid.0, vit.grid.1])?;
        let (map_c, global_c) = self.lru(Branch::Cnn).forward(fwd, cnn.feature_map)?;
        let (map_t, global_t) = self.lru(Branch::Vit).forward(fwd, vit_map)?;
        RefinedPair::new(map_c, map_t, global_c, global_t)
    }

    /// One transmission module: advances both global tokens by one layer.
    pub fn htm_step<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        state: HtmState<'t>,
        refined: &RefinedPair<'t>,
    ) -> Result<HtmState<'t>> {
        let k = state.layer;
        if k >= self.cfg.layers {
            return Err(cfg_err!(
                "transmission step {k} beyond the configured {} layers",
                self.cfg.layers
            ));
        }
        let mut next = [state.global_c, state.global_t];
        let branches = [Branch::Cnn, Branch::Vit];
        match self.cfg.variant {
            Variant::SeuThenMfu | Variant::SeuOnly => {
                let mut encoded = Vec::with_capacity(2);
                for b in branches {
                    let (sg, sl, w) = self.seu(k, b).forward(fwd, state.global(b), refined.locals(b))?;
                    fwd.record_attention(k, b, Unit::Seu, w);
                    encoded.push((sg, sl));
                }
                if self.cfg.variant == Variant::SeuOnly {
                    next = [encoded[0].0, encoded[1].0];
                } else {
                    for (i, b) in branches.into_iter().enumerate() {
                        let other = encoded[1 - i].1;
                        let (f, w) = self.mfu(k, b).forward(fwd, encoded[i].0, other)?;
                        fwd.record_attention(k, b, Unit::Mfu, w);
                        next[i] = f;
                    }
                }
            }
            Variant::MfuThenSeu | Variant::MfuOnly => {
                for (i, b) in branches.into_iter().enumerate() {
                    let other = refined.locals(b.other());
                    let (f, w) = self.mfu(k, b).forward(fwd, state.global(b), other)?;
                    fwd.record_attention(k, b, Unit::Mfu, w);
                    next[i] = f;
                }
                if self.cfg.variant == Variant::MfuThenSeu {
                    for (i, b) in branches.into_iter().enumerate() {
                        let (sg, _, w) = self.seu(k, b).forward(fwd, next[i], refined.locals(b))?;
                        fwd.record_attention(k, b, Unit::Seu, w);
                        next[i] = sg;
                    }
                }
            }
        }
        Ok(HtmState {
            layer: k + 1,
            global_c: next[0],
            global_t: next[1],
        })
    }

    pub fn forward<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        cnn: &BranchOutput<'t>,
        vit: &BranchOutput<'t>,
    ) -> Result<DmfOutput<'t>> {
        self.cfg.validate()?;
        let refined = self.refine(fwd, cnn, vit)?;
        let mut states = vec![refined.initial_state()];
        for _ in 0..self.cfg.layers {
            let next = self.htm_step(fwd, *states.last().unwrap(), &refined)?;
            states.push(next);
        }
        Ok(DmfOutput { refined, states })
    }

    /// Closed-form parameter counts; a pure function of the configuration.
    pub fn count_params(&self) -> Result<DmfParamCounts> {
        self.cfg.validate()?;
        let d = self.cfg.dim;
        let h = self.cfg.hidden();
        let v = self.cfg.variant;
        let copies = |shared: bool| if shared { 1 } else { 2 };
        let seu_per_layer = if v.has_seu() {
            copies(self.cfg.seu_shared) * Seu::num_params(d, h)
        } else {
            0
        };
        let mfu_per_layer = if v.has_mfu() {
            copies(self.cfg.mfu_shared) * Mfu::num_params(d, h)
        } else {
            0
        };
        let htm_stack = self.cfg.layers * (seu_per_layer + mfu_per_layer);
        let k = self.cfg.lru_kernel;
        let lru_c = Lru::num_params(self.cnn_dim, d, k, self.pooling);
        let lru_t = Lru::num_params(self.vit_dim, d, k, self.pooling);
        Ok(DmfParamCounts {
            lru_c,
            lru_t,
            seu_per_layer,
            mfu_per_layer,
            htm_stack,
            total: lru_c + lru_t + htm_stack,
        })
    }

    /// Analytic per-image FLOPs (2 × multiply-accumulates) of the
    /// transmission stack.
    pub fn htm_flops(&self) -> u64 {
        let d = self.cfg.dim as u64;
        let hidden = self.cfg.hidden() as u64;
        let hw = (self.cfg.grid.0 * self.cfg.grid.1) as u64;
        let t = hw + 1;
        let seu = 4 * t * d * d + 2 * t * t * d + 2 * t * d * hidden;
        let mfu = d * d + 2 * hw * d * d + 2 * hw * d + 2 * d * hidden;
        let v = self.cfg.variant;
        let per_layer = 2 * (u64::from(v.has_seu()) * seu + u64::from(v.has_mfu()) * mfu);
        2 * self.cfg.layers as u64 * per_layer
    }
}
