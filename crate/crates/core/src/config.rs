//! Run configuration: a TOML file with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, resize_bilinear, synth_generate, Dataset, Manifest, Split, SynthConfig};
use crate::error::{cfg_err, Error, Result};
use crate::model::{FusionReid, ModelConfig};
use crate::trainer::{OptimConfig, TrainConfig};

pub const SEED_ENV: &str = "FUSIONREID_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[default]
    Synthetic,
    Manifest,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: SourceKind,
    /// CSV manifest, required when `source = "manifest"`. Relative paths
    /// resolve against the directory of the config file.
    pub manifest: Option<PathBuf>,
    pub synthetic: SynthConfig,
}

/// Which samples are matched against which at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPolicy {
    /// The query split against the gallery split.
    #[default]
    QueryGallery,
    /// Training images as queries against every held-out image.
    TrainVsHeldOut,
}

impl EvalPolicy {
    pub fn splits(self) -> (&'static [Split], &'static [Split]) {
        match self {
            EvalPolicy::QueryGallery => (&[Split::Query], &[Split::Gallery]),
            EvalPolicy::TrainVsHeldOut => (&[Split::Train], &[Split::Query, Split::Gallery]),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub policy: EvalPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// The small synthetic setup: 8 identities, PK batches of 4×4 and a
    /// 200-step schedule.
    pub fn toy() -> Self {
        Self {
            output_dir: PathBuf::from("runs/toy"),
            optim: OptimConfig {
                base_lr: 5e-4,
                peak_lr: 5e-3,
                warmup_epochs: 10.0,
                total_epochs: 100.0,
                ..OptimConfig::default()
            },
            ..Self::default()
        }
    }

    /// Parses TOML text and applies `key=value` overrides, where keys are
    /// dotted paths and values are TOML literals (bare words are strings).
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| cfg_err!("{}", e.to_string().trim_end()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err!("{}", e.to_string().trim_end()))?;
        Ok(cfg)
    }

    /// Reads a config file, applies overrides and the seed environment
    /// variable, and resolves relative data paths against the file.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                cfg.data.manifest = Some(base.join(m));
            }
        }
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| cfg_err!("{SEED_ENV} must be an unsigned integer, got `{v}`"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        FusionReid::new(self.model.clone())?;
        self.optim.validate()?;
        if self.train.p < 1 || self.train.k < 2 {
            return Err(cfg_err!("train.p must be >= 1 and train.k >= 2"));
        }
        match (self.data.source, &self.data.manifest) {
            (SourceKind::Manifest, None) => Err(cfg_err!("data.manifest is required when data.source = \"manifest\"")),
            (SourceKind::Manifest, Some(p)) if !p.is_file() => {
                Err(cfg_err!("data.manifest: no such file `{}`", p.display()))
            }
            _ => Ok(()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| cfg_err!("cannot serialize config: {e}"))
    }

    /// Writes the resolved configuration as `config.toml` under `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads or generates the dataset at the model's input size.
    pub fn dataset(&self) -> Result<Dataset> {
        let (h, w) = (self.model.image_height, self.model.image_width);
        match self.data.source {
            SourceKind::Synthetic => {
                let mut synth = self.data.synthetic.clone();
                synth.seed = synth.seed.wrapping_add(self.seed);
                Ok(resize_dataset(synth_generate(&synth)?, h, w))
            }
            SourceKind::Manifest => {
                let path = self
                    .data
                    .manifest
                    .as_ref()
                    .ok_or_else(|| cfg_err!("data.manifest is required when data.source = \"manifest\""))?;
                load_dataset(&Manifest::read(path)?, h, w)
            }
        }
    }
}

pub fn resize_dataset(mut dataset: Dataset, height: usize, width: usize) -> Dataset {
    if (dataset.height, dataset.width) != (height, width) {
        for s in &mut dataset.samples {
            s.image = resize_bilinear(&s.image, height, width);
        }
        dataset.height = height;
        dataset.width = width;
    }
    dataset
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| cfg_err!("override `{spec}` is not of the form key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err!("override key `{key}` is malformed"));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| cfg_err!("override `{key}`: `{part}` is not a section"))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
