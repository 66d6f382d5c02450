//! Dual-branch feature extraction: a small residual CNN and a small ViT
//! with a learnable class token and per-camera embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, Error, Result};
use crate::nn::{pool, Forward, Init, Pooling, TransformerBlock, GEM_P_INIT};
use crate::tensor::{ConvMode, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub stem_stride: usize,
    /// Stride of the final stage; every earlier stage downsamples by 2.
    pub last_stride: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![8, 16],
            blocks_per_stage: vec![1, 1],
            stem_stride: 2,
            last_stride: 1,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(cfg_err!("cnn.stage_channels must not be empty"));
        }
        if self.stage_channels.len() != self.blocks_per_stage.len() {
            return Err(cfg_err!(
                "cnn.stage_channels has {} entries but cnn.blocks_per_stage has {}",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            ));
        }
        if self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) {
            return Err(cfg_err!("cnn stages need at least one channel and one block"));
        }
        if self.stem_stride == 0 || !(1..=2).contains(&self.last_stride) {
            return Err(cfg_err!(
                "cnn.stem_stride must be ≥ 1 and cnn.last_stride 1 or 2"
            ));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    fn stage_stride(&self, stage: usize) -> usize {
        if stage + 1 == self.stage_channels.len() {
            self.last_stride
        } else {
            2
        }
    }

    pub fn total_stride(&self) -> usize {
        (0..self.stage_channels.len())
            .map(|s| self.stage_stride(s))
            .product::<usize>()
            * self.stem_stride
    }

    /// Output grid `(H_c, W_c)` for an input of `height × width`.
    pub fn output_grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let s = self.total_stride();
        if height % s != 0 || width % s != 0 || height == 0 || width == 0 {
            return Err(cfg_err!(
                "input {height}×{width} is not divisible by the CNN total stride {s}"
            ));
        }
        Ok((height / s, width / s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub patch_size: usize,
    /// Equal to `patch_size` for non-overlapping patches.
    pub patch_stride: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_cameras: usize,
    /// Scale applied to the camera embedding before it is added.
    pub camera_scale: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            patch_stride: 4,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            num_cameras: 2,
            camera_scale: 1.0,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_stride == 0 || self.patch_stride > self.patch_size {
            return Err(cfg_err!(
                "vit.patch_stride must be in 1..=patch_size (got patch {} stride {})",
                self.patch_size,
                self.patch_stride
            ));
        }
        crate::nn::check_heads(self.embed_dim, self.heads)?;
        if self.num_cameras == 0 {
            return Err(cfg_err!("vit.num_cameras must be at least 1"));
        }
        if !(self.camera_scale >= 0.0) {
            return Err(cfg_err!("vit.camera_scale must be ≥ 0"));
        }
        Ok(())
    }

    /// Patch grid `(rows, cols)`; the grid must tile the input exactly.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |extent: usize, name: &str| -> Result<usize> {
            if extent < self.patch_size || (extent - self.patch_size) % self.patch_stride != 0 {
                return Err(cfg_err!(
                    "patch {} with stride {} does not tile image {name} {extent}",
                    self.patch_size,
                    self.patch_stride
                ));
            }
            Ok((extent - self.patch_size) / self.patch_stride + 1)
        };
        Ok((axis(height, "height")?, axis(width, "width")?))
    }

    pub fn num_patches(&self, height: usize, width: usize) -> Result<usize> {
        let (h, w) = self.grid(height, width)?;
        Ok(h * w)
    }
}

/// Output of one backbone for a batch.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput<'t> {
    /// CNN: `[B, D_c, H_c, W_c]`; ViT: `[B, D_t, N]` (class token excluded).
    pub feature_map: Var<'t>,
    /// CNN: GeM of the map; ViT: class-token output. `[B, D]`.
    pub global_vec: Var<'t>,
    /// Spatial grid of the feature map.
    pub grid: (usize, usize),
}

fn image_dims(images: &Var<'_>) -> Result<(usize, usize, usize)> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Dimension(format!(
            "expected images of shape [B, 3, H, W], got {s:?}"
        )));
    }
    Ok((s[0], s[2], s[3]))
}

/// Residual CNN: 3×3 stem, then stages of basic blocks.
pub struct Cnn {
    pub cfg: CnnConfig,
    pub prefix: String,
    pub pooling: Pooling,
}

impl Cnn {
    pub fn new(cfg: CnnConfig, prefix: impl Into<String>) -> Self {
        Self {
            cfg,
            prefix: prefix.into(),
            pooling: Pooling::Gem,
        }
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    fn blocks(&self) -> Vec<(String, usize, usize, usize)> {
        let mut blocks = Vec::new();
        let mut in_ch = self.cfg.stage_channels[0];
        for (s, (&out_ch, &n)) in self
            .cfg
            .stage_channels
            .iter()
            .zip(&self.cfg.blocks_per_stage)
            .enumerate()
        {
            for b in 0..n {
                let stride = if b == 0 { self.cfg.stage_stride(s) } else { 1 };
                blocks.push((format!("{}.stage{s}.block{b}", self.prefix), in_ch, out_ch, stride));
                in_ch = out_ch;
            }
        }
        blocks
    }

    pub fn init(&self, init: &mut Init<'_>) -> Result<()> {
        self.cfg.validate()?;
        let p = &self.prefix;
        let c0 = self.cfg.stage_channels[0];
        init.conv(&format!("{p}.stem.conv.weight"), c0, 3, 3, 3)?;
        init.batch_norm(&format!("{p}.stem.bn"), c0)?;
        for (bp, in_ch, out_ch, stride) in self.blocks() {
            init.conv(&format!("{bp}.conv1.weight"), out_ch, in_ch, 3, 3)?;
            init.batch_norm(&format!("{bp}.bn1"), out_ch)?;
            init.conv(&format!("{bp}.conv2.weight"), out_ch, out_ch, 3, 3)?;
            init.batch_norm(&format!("{bp}.bn2"), out_ch)?;
            if in_ch != out_ch || stride != 1 {
                init.conv(&format!("{bp}.down.conv.weight"), out_ch, in_ch, 1, 1)?;
                init.batch_norm(&format!("{bp}.down.bn"), out_ch)?;
            }
        }
        if self.pooling == Pooling::Gem {
            init.param(format!("{p}.gem_p"), Tensor::vector(&[GEM_P_INIT]))?;
        }
        Ok(())
    }

    /// `images: [B, 3, H, W]`.
    pub fn forward<'t>(&self, fwd: &mut Forward<'t, '_>, images: Var<'t>) -> Result<BranchOutput<'t>> {
        let (_, h, w) = image_dims(&images)?;
        let grid = self.cfg.output_grid(h, w)?;
        let p = &self.prefix;
        let k = fwd.param(&format!("{p}.stem.conv.weight"))?;
        let x = images.convolve(k, None, ConvMode::Standard, self.cfg.stem_stride, 1)?;
        let mut x = fwd.batch_norm(&format!("{p}.stem.bn"), x)?.relu();
        for (bp, in_ch, out_ch, stride) in self.blocks() {
            let k1 = fwd.param(&format!("{bp}.conv1.weight"))?;
            let y = x.convolve(k1, None, ConvMode::Standard, stride, 1)?;
            let y = fwd.batch_norm(&format!("{bp}.bn1"), y)?.relu();
            let k2 = fwd.param(&format!("{bp}.conv2.weight"))?;
            let y = y.convolve(k2, None, ConvMode::Standard, 1, 1)?;
            let y = fwd.batch_norm(&format!("{bp}.bn2"), y)?;
            let shortcut = if in_ch != out_ch || stride != 1 {
                let kd = fwd.param(&format!("{bp}.down.conv.weight"))?;
                let s = x.convolve(kd, None, ConvMode::Standard, stride, 0)?;
                fwd.batch_norm(&format!("{bp}.down.bn"), s)?
            } else {
                x
            };
            x = y.add(shortcut)?.relu();
        }
        let global_vec = pool(fwd, &format!("{p}.gem_p"), self.pooling, x)?;
        Ok(BranchOutput {
            feature_map: x,
            global_vec,
            grid,
        })
    }
}

/// Adds `scale · table[cam_id]` to every token of `tokens: [B, T, D]`.
/// A zero scale leaves the tokens untouched.
pub fn add_camera_embedding<'t>(
    tokens: Var<'t>,
    cam_ids: &[usize],
    table: Var<'t>,
    scale: f64,
) -> Result<Var<'t>> {
    let ts = tokens.shape();
    let tab = table.shape();
    if ts.len() != 3 || cam_ids.len() != ts[0] || tab.len() != 2 || tab[1] != ts[2] {
        return Err(Error::Dimension(format!(
            "camera embedding: tokens {ts:?}, {} camera ids, table {tab:?}",
            cam_ids.len()
        )));
    }
    if let Some(&bad) = cam_ids.iter().find(|&&c| c >= tab[0]) {
        return Err(Error::Data(format!(
            "camera id {bad} out of range for {} cameras",
            tab[0]
        )));
    }
    if scale == 0.0 {
        return Ok(tokens);
    }
    let rows = table.gather_rows(cam_ids)?.reshape(&[ts[0], 1, ts[2]])?;
    tokens.add(rows.scale(scale))
}

/// Small pre-norm Vision Transformer.
pub struct Vit {
    pub cfg: VitConfig,
    pub prefix: String,
    pub image_size: (usize, usize),
}

impl Vit {
    pub fn new(cfg: VitConfig, prefix: impl Into<String>, image_size: (usize, usize)) -> Self {
        Self {
            cfg,
            prefix: prefix.into(),
            image_size,
        }
    }

    fn block(&self, i: usize) -> TransformerBlock {
        TransformerBlock::new(
            format!("{}.blocks.{i}", self.prefix),
            self.cfg.embed_dim,
            self.cfg.heads,
            self.cfg.embed_dim * self.cfg.mlp_ratio,
        )
    }

    pub fn init(&self, init: &mut Init<'_>) -> Result<()> {
        let n = self.cfg.num_patches(self.image_size.0, self.image_size.1)?;
        let d = self.cfg.embed_dim;
        let p = &self.prefix;
        let ps = self.cfg.patch_size;
        let w = init.trunc_normal(&[d, 3, ps, ps], 0.02);
        init.param(format!("{p}.patch_embed.weight"), w)?;
        init.param(format!("{p}.patch_embed.bias"), Tensor::zeros(&[d]))?;
        init.param(format!("{p}.cls_token"), Tensor::zeros(&[d]))?;
        let pos = init.normal(&[1 + n, d], 0.02);
        init.param(format!("{p}.pos_embed"), pos)?;
        let cam = init.trunc_normal(&[self.cfg.num_cameras, d], 0.02);
        init.param(format!("{p}.cam_embed"), cam)?;
        for i in 0..self.cfg.depth {
            self.block(i).init(init)?;
        }
        Ok(())
    }

    /// Patch tokens before position embedding, `[B, D_t, N]`.
    pub fn patch_embed<'t>(&self, fwd: &mut Forward<'t, '_>, images: Var<'t>) -> Result<Var<'t>> {
        let (b, h, w) = image_dims(&images)?;
        let (gh, gw) = self.cfg.grid(h, w)?;
        let p = &self.prefix;
        let k = fwd.param(&format!("{p}.patch_embed.weight"))?;
        let bias = fwd.param(&format!("{p}.patch_embed.bias"))?;
        let x = images.convolve(k, Some(bias), ConvMode::Standard, self.cfg.patch_stride, 0)?;
        x.reshape(&[b, self.cfg.embed_dim, gh * gw])
    }

    /// `images: [B, 3, H, W]` with one camera id per image.
    pub fn forward<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        images: Var<'t>,
        cam_ids: &[usize],
    ) -> Result<BranchOutput<'t>> {
        let (b, h, w) = image_dims(&images)?;
        if (h, w) != self.image_size {
            return Err(cfg_err!(
                "ViT built for {:?} images, got {h}×{w}",
                self.image_size
            ));
        }
        let grid = self.cfg.grid(h, w)?;
        let d = self.cfg.embed_dim;
        let p = &self.prefix;
        let patches = self.patch_embed(fwd, images)?.permute(&[0, 2, 1])?;
        let cls = fwd
            .param(&format!("{p}.cls_token"))?
            .reshape(&[1, 1, d])?
            .broadcast_to(&[b, 1, d])?;
        let tokens = Var::concat(&[cls, patches], 1)?;
        let pos = fwd.param(&format!("{p}.pos_embed"))?;
        let tokens = tokens.add(pos)?;
        let table = fwd.param(&format!("{p}.cam_embed"))?;
        let mut x = add_camera_embedding(tokens, cam_ids, table, self.cfg.camera_scale)?;
        for i in 0..self.cfg.depth {
            x = self.block(i).forward(fwd, x)?.0;
        }
        let (cls_out, rest) = x.split_at(1, 1)?;
        Ok(BranchOutput {
            feature_map: rest.permute(&[0, 2, 1])?,
            global_vec: cls_out.reshape(&[b, d])?,
            grid,
        })
    }
}
