//! The full model: both backbones, the fusion stack and the supervised
//! heads, plus single-backbone baselines sharing the same code paths.

use serde::{Deserialize, Serialize};

use crate::backbones::{BranchOutput, Cnn, CnnConfig, Vit, VitConfig};
use crate::dmf::{Dmf, DmfConfig, DmfOutput, Pooling};
use crate::error::{cfg_err, Result};
use crate::nn::{Forward, Init};
use crate::objective::{HeadId, Objective, LABEL_SMOOTHING};
use crate::rng::{stream, Purpose};
use crate::tensor::{ParamStore, Var};

/// Which parts of the network are built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Both backbones fused by the attention stack; six supervised heads.
    #[default]
    Fused,
    /// CNN backbone alone, supervised on its pooled vector.
    CnnOnly,
    /// ViT backbone alone, supervised on its class token.
    VitOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Number of training identities (classifier width `J`).
    pub num_classes: usize,
    pub architecture: Architecture,
    pub pooling: Pooling,
    pub bn_neck: bool,
    pub label_smoothing: f64,
    pub cnn: CnnConfig,
    pub vit: VitConfig,
    pub dmf: DmfConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 16,
            num_classes: 8,
            architecture: Architecture::Fused,
            pooling: Pooling::Gem,
            bn_neck: true,
            label_smoothing: LABEL_SMOOTHING,
            cnn: CnnConfig::default(),
            vit: VitConfig::default(),
            dmf: DmfConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        FusionReid::new(self.clone()).map(|_| ())
    }
}

/// Features of one forward pass.
pub struct ModelOutput<'t> {
    /// Supervised features in head order, each `[B, D_g]`.
    pub features: Vec<(HeadId, Var<'t>)>,
    pub cnn: Option<BranchOutput<'t>>,
    pub vit: Option<BranchOutput<'t>>,
    pub dmf: Option<DmfOutput<'t>>,
}

impl<'t> ModelOutput<'t> {
    pub fn feature(&self, head: HeadId) -> Option<Var<'t>> {
        self.features.iter().find(|(h, _)| *h == head).map(|(_, v)| *v)
    }
}

pub struct FusionReid {
    pub cfg: ModelConfig,
    pub cnn: Cnn,
    pub vit: Vit,
    pub dmf: Dmf,
    pub objective: Objective,
}

impl FusionReid {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(cfg_err!("model.num_classes must be at least 2"));
        }
        if !(0.0..1.0).contains(&cfg.label_smoothing) {
            return Err(cfg_err!("model.label_smoothing must lie in [0, 1)"));
        }
        let (h, w) = (cfg.image_height, cfg.image_width);
        let cnn_grid = cfg.cnn.output_grid(h, w)?;
        let vit_grid = cfg.vit.grid(h, w)?;
        let cnn = Cnn::new(cfg.cnn.clone(), "cnn").with_pooling(cfg.pooling);
        let vit = Vit::new(cfg.vit.clone(), "vit", (h, w));
        let dmf = Dmf {
            cfg: cfg.dmf.clone(),
            prefix: "dmf".into(),
            cnn_dim: cfg.cnn.out_channels(),
            cnn_grid,
            vit_dim: cfg.vit.embed_dim,
            vit_grid,
            pooling: cfg.pooling,
        };
        if cfg.architecture == Architecture::Fused {
            cfg.dmf.validate()?;
            dmf.lru(crate::nn::Branch::Cnn).stride()?;
            dmf.lru(crate::nn::Branch::Vit).stride()?;
        }
        let heads = Self::head_dims_for(&cfg);
        let objective = Objective {
            heads,
            num_classes: cfg.num_classes,
            bn_neck: cfg.bn_neck,
            epsilon: cfg.label_smoothing,
        };
        Ok(Self {
            cfg,
            cnn,
            vit,
            dmf,
            objective,
        })
    }

    fn head_dims_for(cfg: &ModelConfig) -> Vec<(HeadId, usize)> {
        let dc = cfg.cnn.out_channels();
        let dt = cfg.vit.embed_dim;
        let d = cfg.dmf.dim;
        match cfg.architecture {
            Architecture::Fused => vec![
                (HeadId::CnnGlobal, dc),
                (HeadId::VitGlobal, dt),
                (HeadId::CnnAligned, d),
                (HeadId::VitAligned, d),
                (HeadId::CnnFused, d),
                (HeadId::VitFused, d),
            ],
            Architecture::CnnOnly => vec![(HeadId::CnnGlobal, dc)],
            Architecture::VitOnly => vec![(HeadId::VitGlobal, dt)],
        }
    }

    /// Supervised heads and their dimensions, in concatenation order.
    pub fn head_dims(&self) -> &[(HeadId, usize)] {
        &self.objective.heads
    }

    /// Dimension of the concatenated retrieval embedding.
    pub fn embedding_dim(&self) -> usize {
        self.head_dims().iter().map(|h| h.1).sum()
    }

    fn uses_cnn(&self) -> bool {
        self.cfg.architecture != Architecture::VitOnly
    }

    fn uses_vit(&self) -> bool {
        self.cfg.architecture != Architecture::CnnOnly
    }

    /// Fresh parameters; identical seeds give identical stores.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, Purpose::Init, 0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        if self.uses_cnn() {
            self.cnn.init(&mut init)?;
        }
        if self.uses_vit() {
            self.vit.init(&mut init)?;
        }
        if self.cfg.architecture == Architecture::Fused {
            self.dmf.init(&mut init)?;
        }
        self.objective.init(&mut init)?;
        Ok(store)
    }

    /// `images: [B, 3, H, W]`, one camera id per image.
    pub fn forward<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        images: Var<'t>,
        cam_ids: &[usize],
    ) -> Result<ModelOutput<'t>> {
        let mut features = Vec::with_capacity(6);
        let cnn = if self.uses_cnn() {
            let out = self.cnn.forward(fwd, images)?;
            features.push((HeadId::CnnGlobal, out.global_vec));
            Some(out)
        } else {
            None
        };
        let vit = if self.uses_vit() {
            let out = self.vit.forward(fwd, images, cam_ids)?;
            features.push((HeadId::VitGlobal, out.global_vec));
            Some(out)
        } else {
            None
        };
        let dmf = match (&cnn, &vit) {
            (Some(c), Some(t)) => {
                let out = self.dmf.forward(fwd, c, t)?;
                let last = out.final_state();
                features.push((HeadId::CnnAligned, out.refined.global_c));
                features.push((HeadId::VitAligned, out.refined.global_t));
                features.push((HeadId::CnnFused, last.global_c));
                features.push((HeadId::VitFused, last.global_t));
                Some(out)
            }
            _ => None,
        };
        Ok(ModelOutput {
            features,
            cnn,
            vit,
            dmf,
        })
    }
}
