//! Optimization: learning-rate schedule, SGD with momentum, and the
//! end-to-end training step.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{augment, stack, AugmentPolicy, ChannelStats, Dataset, PkSampler, Split};
use crate::error::{cfg_err, Error, Result};
use crate::model::FusionReid;
use crate::nn::Forward;
use crate::objective::HeadLoss;
use crate::rng::{stream, Purpose};
use crate::tensor::{ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub min_lr: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            peak_lr: 5e-3,
            warmup_epochs: 10.0,
            total_epochs: 180.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            min_lr: 0.0,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr <= self.peak_lr) {
            return Err(cfg_err!(
                "optim.base_lr must satisfy 0 < base_lr <= peak_lr (got {} and {})",
                self.base_lr,
                self.peak_lr
            ));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs) {
            return Err(cfg_err!(
                "optim.warmup_epochs ({}) must be non-negative and below optim.total_epochs ({})",
                self.warmup_epochs,
                self.total_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(cfg_err!("optim.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 || self.min_lr < 0.0 || self.min_lr > self.peak_lr {
            return Err(cfg_err!(
                "optim.weight_decay must be >= 0 and optim.min_lr within [0, peak_lr]"
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(cfg_err!("optim.grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Linear warmup from `base_lr` to `peak_lr`, then cosine decay to `min_lr`.
pub fn lr_schedule(epoch: f64, cfg: &OptimConfig) -> Result<f64> {
    if !(0.0..=cfg.total_epochs).contains(&epoch) {
        return Err(Error::Usage(format!(
            "epoch {epoch} outside the schedule range [0, {}]",
            cfg.total_epochs
        )));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * epoch / cfg.warmup_epochs);
    }
    let progress = (epoch - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs);
    Ok(cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Parameters trained without weight decay: biases, normalization affines,
/// PReLU slopes, the class token, position embeddings, GeM exponents and
/// the identity classifiers.
pub fn decay_exempt(path: &str) -> bool {
    let leaf = path.rsplit('.').next().unwrap_or(path);
    matches!(leaf, "bias" | "gamma" | "beta" | "cls_token" | "pos_embed" | "gem_p")
        || leaf.ends_with("prelu")
        || path.ends_with(".classifier.weight")
}

/// Momentum buffers keyed by parameter path.
pub type Momentum = BTreeMap<String, Tensor>;

/// Lower bound kept on GeM exponents after every update, so pooling stays
/// between average (`p = 1`) and max pooling.
pub const GEM_MIN_P: f64 = 1.0;

/// One SGD update over every parameter; each must carry a gradient.
pub fn sgd_step(store: &mut ParamStore, velocity: &mut Momentum, lr: f64, cfg: &OptimConfig) -> Result<()> {
    if let Some(missing) = store.iter().find(|(_, p)| p.grad.is_none()).map(|(k, _)| k.to_string()) {
        return Err(Error::Usage(format!("parameter `{missing}` has no gradient")));
    }
    let scale = match cfg.grad_clip {
        Some(clip) => {
            let norm = store.grad_norm();
            if norm > clip {
                clip / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for (path, param) in store.iter_mut() {
        let grad = param.grad.as_ref().expect("checked above");
        let wd = if decay_exempt(path) { 0.0 } else { cfg.weight_decay };
        let v = velocity
            .entry(path.to_string())
            .or_insert_with(|| Tensor::zeros(param.value.shape()));
        let value = param.value.data_mut();
        for ((vi, gi), pi) in v.data_mut().iter_mut().zip(grad.data()).zip(value.iter_mut()) {
            *vi = cfg.momentum * *vi + (gi * scale + wd * *pi);
            *pi -= lr * *vi;
        }
        if path.ends_with("gem_p") {
            value.iter_mut().for_each(|p| *p = p.max(GEM_MIN_P));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    /// Stop after this many steps even if the schedule runs longer.
    pub max_steps: Option<usize>,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 4,
            k: 4,
            max_steps: None,
            checkpoint_every: 0,
            augment: AugmentPolicy::default(),
        }
    }
}

/// Training images with their class labels and sampling schedule.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub dataset: Dataset,
    pub stats: ChannelStats,
    pub sampler: PkSampler,
    /// Dense class index per dataset sample (meaningful for training
    /// samples only).
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl TrainData {
    pub fn new(dataset: Dataset, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let train = dataset.split(Split::Train);
        if train.is_empty() {
            return Err(Error::Data("the training split is empty".into()));
        }
        let stats = ChannelStats::from_samples(&train)?;
        let pids = dataset.pids(Split::Train);
        let index: BTreeMap<usize, usize> = pids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let labels = dataset
            .samples
            .iter()
            .map(|s| index.get(&s.pid).copied().unwrap_or(usize::MAX))
            .collect();
        let sampler = PkSampler::new(&dataset, cfg.p, cfg.k, seed)?;
        Ok(Self {
            dataset,
            stats,
            sampler,
            labels,
            num_classes: pids.len(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }
}

/// Losses and learning rate of one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    pub total: f64,
    pub ce_sum: f64,
    pub tri_sum: f64,
    pub heads: Vec<HeadLoss>,
}

/// State captured when a step produces a non-finite loss.
#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    pub step: usize,
    pub lr: f64,
    pub batch_indices: Vec<usize>,
    pub batch_pids: Vec<usize>,
    pub total: f64,
    pub heads: Vec<HeadLoss>,
    /// Gradient norms from the last completed step, by parameter path.
    pub grad_norms: BTreeMap<String, f64>,
}

pub struct Trainer {
    pub model: FusionReid,
    pub store: ParamStore,
    pub velocity: Momentum,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: TrainData,
    pub seed: u64,
    /// Number of completed steps.
    pub step: usize,
    pub diagnostics: Option<Diagnostics>,
    epoch_cache: Option<(usize, Vec<crate::data::Batch>)>,
}

impl Trainer {
    pub fn new(model: FusionReid, optim: OptimConfig, train: TrainConfig, dataset: Dataset, seed: u64) -> Result<Self> {
        optim.validate()?;
        if train.k < 2 {
            return Err(cfg_err!("train.k must be at least 2 for triplet mining, got {}", train.k));
        }
        if (dataset.height, dataset.width) != (model.cfg.image_height, model.cfg.image_width) {
            return Err(cfg_err!(
                "dataset images are {}×{} but the model expects {}×{}",
                dataset.height,
                dataset.width,
                model.cfg.image_height,
                model.cfg.image_width
            ));
        }
        let data = TrainData::new(dataset, &train, seed)?;
        if data.num_classes > model.cfg.num_classes {
            return Err(cfg_err!(
                "model.num_classes ({}) is smaller than the number of training identities ({})",
                model.cfg.num_classes,
                data.num_classes
            ));
        }
        let store = model.init_params(seed)?;
        Ok(Self {
            model,
            store,
            velocity: Momentum::new(),
            optim,
            train,
            data,
            seed,
            step: 0,
            diagnostics: None,
            epoch_cache: None,
        })
    }

    /// Rebuilds a trainer from a checkpoint so that the next step matches
    /// an uninterrupted run.
    pub fn resume(ck: Checkpoint, dataset: Dataset) -> Result<Self> {
        let model = FusionReid::new(ck.model)?;
        let mut t = Self::new(model, ck.optim, ck.train, dataset, ck.seed)?;
        let expected: Vec<&str> = t.store.paths().collect();
        let found: Vec<&str> = ck.store.paths().collect();
        if expected != found {
            return Err(Error::Checkpoint(
                "checkpoint parameters do not match the model layout".into(),
            ));
        }
        t.store = ck.store;
        t.velocity = ck.velocity;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut store = self.store.clone();
        store.zero_grads();
        Checkpoint {
            model: self.model.cfg.clone(),
            optim: self.optim.clone(),
            train: self.train.clone(),
            stats: self.data.stats,
            seed: self.seed,
            step: self.step,
            epoch: self.epoch_of(self.step),
            store,
            velocity: self.velocity.clone(),
        }
    }

    /// Steps implied by the schedule, capped by `max_steps`.
    pub fn total_steps(&self) -> usize {
        let scheduled = (self.optim.total_epochs * self.data.steps_per_epoch() as f64).floor() as usize;
        self.train.max_steps.map_or(scheduled, |m| m.min(scheduled))
    }

    pub fn epoch_of(&self, step: usize) -> f64 {
        step as f64 / self.data.steps_per_epoch() as f64
    }

    fn batch_for(&mut self, step: usize) -> crate::data::Batch {
        let per = self.data.steps_per_epoch();
        let (epoch, slot) = (step / per, step % per);
        match &self.epoch_cache {
            Some((e, batches)) if *e == epoch => batches[slot].clone(),
            _ => {
                let batches = self.data.sampler.epoch(epoch);
                let batch = batches[slot].clone();
                self.epoch_cache = Some((epoch, batches));
                batch
            }
        }
    }

    /// Augmented, normalized images of a batch.
    pub fn batch_images(&self, indices: &[usize], step: usize) -> Result<Tensor> {
        let mut rng = stream(self.seed, Purpose::Augment, step as u64);
        let fill = self.data.stats.mean;
        let images: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                let raw = &self.data.dataset.samples[i].image;
                let aug = augment(raw, &mut rng, &self.train.augment, fill);
                self.data.stats.normalize(&aug)
            })
            .collect();
        stack(&images)
    }

    /// Runs the next optimization step.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let epoch = self.epoch_of(step);
        let lr = lr_schedule(epoch, &self.optim)?;
        let batch = self.batch_for(step);
        let images = self.batch_images(&batch.indices, step)?;
        let labels: Vec<usize> = batch.indices.iter().map(|&i| self.data.labels[i]).collect();
        let cams: Vec<usize> = batch
            .indices
            .iter()
            .map(|&i| self.data.dataset.samples[i].cam_id)
            .collect();

        let tape = Tape::new();
        let mut fwd = Forward::train(&tape, &mut self.store);
        let out = self.model.forward(&mut fwd, tape.constant(images), &cams)?;
        let loss = self.model.objective.total_loss(&mut fwd, &out.features, &labels, &batch.pids)?;
        let total = loss.total.item();
        let metrics = StepMetrics {
            step,
            epoch,
            lr,
            total,
            ce_sum: loss.ce_sum(),
            tri_sum: loss.tri_sum(),
            heads: loss.breakdown.clone(),
        };
        if !total.is_finite() {
            drop(fwd);
            let grad_norms = self
                .store
                .iter()
                .filter_map(|(k, p)| p.grad.as_ref().map(|g| (k.to_string(), g.data().iter().map(|v| v * v).sum::<f64>().sqrt())))
                .collect();
            self.diagnostics = Some(Diagnostics {
                step,
                lr,
                batch_indices: batch.indices.clone(),
                batch_pids: batch.pids.clone(),
                total,
                heads: metrics.heads.clone(),
                grad_norms,
            });
            return Err(Error::Numerical(format!("loss became {total} at step {step}")));
        }
        let grads = tape.backward(loss.total)?;
        fwd.store_grads(&grads);
        drop(fwd);
        sgd_step(&mut self.store, &mut self.velocity, lr, &self.optim)?;
        self.step += 1;
        Ok(metrics)
    }
}

/// Writes training metrics as CSV in long form: one row per head per step,
/// followed by a `total` row holding the sums over heads.
pub struct TrainLog<W: Write> {
    out: csv::Writer<W>,
    header_written: bool,
}

pub const LOG_HEADER: [&str; 6] = ["step", "head", "ce", "tri", "epoch", "lr"];

impl TrainLog<std::fs::File> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(file))
    }

    /// Appends to an existing log (used when resuming).
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: csv::Writer::from_writer(file),
            header_written: true,
        })
    }
}

impl<W: Write> TrainLog<W> {
    pub fn new(out: W) -> Self {
        Self {
            out: csv::Writer::from_writer(out),
            header_written: false,
        }
    }

    pub fn record(&mut self, m: &StepMetrics) -> Result<()> {
        let wrap = |e: csv::Error| Error::Data(format!("training log: {e}"));
        if !self.header_written {
            self.out.write_record(LOG_HEADER).map_err(wrap)?;
            self.header_written = true;
        }
        let rows = m
            .heads
            .iter()
            .map(|h| (h.head.to_string(), h.ce, h.tri))
            .chain(std::iter::once(("total".to_string(), m.ce_sum, m.tri_sum)));
        for (head, ce, tri) in rows {
            self.out
                .write_record([
                    m.step.to_string(),
                    head,
                    ce.to_string(),
                    tri.to_string(),
                    m.epoch.to_string(),
                    m.lr.to_string(),
                ])
                .map_err(wrap)?;
        }
        self.out.flush().map_err(|e| Error::Data(format!("training log: {e}")))
    }

    pub fn into_inner(self) -> Result<W> {
        self.out
            .into_inner()
            .map_err(|e| Error::Data(format!("training log: {}", e.error())))
    }
}
