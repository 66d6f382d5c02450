//! Single-file training checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "FRIDCKPT"
//! version  u32
//! length   u64       byte length of the JSON header
//! header   JSON      configuration, counters and the entry table
//! blobs    f64 LE    entry payloads in table order
//! ```
//!
//! The entry table lists parameters, then momentum buffers, then
//! normalization buffers, each section in lexicographic path order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{ParamStore, Tensor};
use crate::trainer::{Momentum, OptimConfig, TrainConfig};

pub const MAGIC: &[u8; 8] = b"FRIDCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Param,
    Momentum,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub section: Section,
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    optim: OptimConfig,
    train: TrainConfig,
    stats: ChannelStats,
    seed: u64,
    step: usize,
    epoch: f64,
    entries: Vec<Entry>,
}

/// Everything needed to continue a run exactly where it stopped. Random
/// streams are derived from `(seed, step)`, so no generator state is kept.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    /// Input normalization fitted on the training split.
    pub stats: ChannelStats,
    pub seed: u64,
    pub step: usize,
    pub epoch: f64,
    pub store: ParamStore,
    pub velocity: Momentum,
}

impl Checkpoint {
    fn entries(&self) -> Vec<(Entry, &Tensor)> {
        let entry = |section, path: &str, t: &Tensor| Entry {
            section,
            path: path.to_string(),
            shape: t.shape().to_vec(),
        };
        let mut out: Vec<(Entry, &Tensor)> = self
            .store
            .iter()
            .map(|(k, p)| (entry(Section::Param, k, &p.value), &p.value))
            .collect();
        out.extend(self.velocity.iter().map(|(k, v)| (entry(Section::Momentum, k, v), v)));
        out.extend(self.store.buffers().map(|(k, b)| (entry(Section::Buffer, k, b), b)));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = self.entries();
        let header = Header {
            model: self.model.clone(),
            optim: self.optim.clone(),
            train: self.train.clone(),
            stats: self.stats,
            seed: self.seed,
            step: self.step,
            epoch: self.epoch,
            entries: entries.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload: usize = entries.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |what: &str| Error::Checkpoint(format!("file is truncated ({what})"));
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic bytes)".into()));
        }
        let version = u32::from_le_bytes(bytes.get(8..12).ok_or_else(|| truncated("version"))?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads version {VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes.get(12..20).ok_or_else(|| truncated("header length"))?.try_into().unwrap());
        let end = 20usize
            .checked_add(usize::try_from(len).map_err(|_| truncated("header length"))?)
            .ok_or_else(|| truncated("header length"))?;
        let json = bytes.get(20..end).ok_or_else(|| truncated("header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

        let mut store = ParamStore::new();
        let mut velocity = Momentum::new();
        let mut cursor = end;
        for entry in &header.entries {
            let short = || truncated(&format!("payload of `{}`", entry.path));
            let stop = entry
                .shape
                .iter()
                .try_fold(8usize, |acc, &d| acc.checked_mul(d))
                .and_then(|len| cursor.checked_add(len))
                .ok_or_else(short)?;
            let raw = bytes.get(cursor..stop).ok_or_else(short)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&entry.shape, data)?;
            cursor = stop;
            match entry.section {
                Section::Param => store.insert(entry.path.clone(), t)?,
                Section::Buffer => store.insert_buffer(entry.path.clone(), t)?,
                Section::Momentum => {
                    velocity.insert(entry.path.clone(), t);
                }
            }
        }
        if cursor != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - cursor
            )));
        }
        Ok(Self {
            model: header.model,
            optim: header.optim,
            train: header.train,
            stats: header.stats,
            seed: header.seed,
            step: header.step,
            epoch: header.epoch,
            store,
            velocity,
        })
    }

    /// Writes to a temporary sibling file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and rejects it unless its model configuration
    /// equals `expected`, listing every differing field.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let diff = config_diff(expected, &ck.model);
        if !diff.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint model configuration differs: {}",
                diff.join(", ")
            )));
        }
        Ok(ck)
    }
}

/// Dotted paths of fields whose values differ, each as
/// `path: expected -> found`.
pub fn config_diff<T: Serialize>(expected: &T, found: &T) -> Vec<String> {
    let a = serde_json::to_value(expected).unwrap_or(Value::Null);
    let b = serde_json::to_value(found).unwrap_or(Value::Null);
    let mut out = Vec::new();
    diff_values("model", &a, &b, &mut out);
    out
}

fn diff_values(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let null = Value::Null;
                diff_values(
                    &format!("{path}.{k}"),
                    x.get(k).unwrap_or(&null),
                    y.get(k).unwrap_or(&null),
                    out,
                );
            }
        }
        _ if a != b => out.push(format!("{path}: {a} -> {b}")),
        _ => {}
    }
}
