//! Datasets, PK sampling and training augmentation.
//!
//! Images are `[3, H, W]` tensors with values in `[0, 1]`. Datasets come
//! either from the synthetic generator or from a CSV manifest of PPM/PNG
//! files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split `{other}` (expected train, query or gallery)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub pid: usize,
    pub cam_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn num_cameras(&self) -> usize {
        self.samples.iter().map(|s| s.cam_id + 1).max().unwrap_or(0)
    }

    /// Distinct pids of a split, ascending.
    pub fn pids(&self, split: Split) -> Vec<usize> {
        let mut pids: Vec<usize> = self.split(split).iter().map(|s| s.pid).collect();
        pids.sort_unstable();
        pids.dedup();
        pids
    }
}

// --- synthetic data -----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_pids: usize,
    pub cams: usize,
    pub views_per_cam: usize,
    /// Trailing views of every (pid, camera) kept out of training; the
    /// first becomes a query, the rest gallery.
    pub held_out_views: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_pids: 8,
            cams: 2,
            views_per_cam: 4,
            held_out_views: 2,
            height: 64,
            width: 32,
            noise: 0.05,
            seed: 0,
        }
    }
}

struct Prototype {
    background: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    stripe: [f64; 3],
    stripe_period: usize,
    striped: bool,
}

struct CameraShift {
    gain: [f64; 3],
    offset: f64,
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Snap to the 8-bit grid so images survive a PPM round trip unchanged.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render(proto: &Prototype, cam: &CameraShift, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let shift = rng.gen_range(-2i64..=2);
    let top = h / 10;
    let waist = h * 11 / 20;
    let bottom = h * 19 / 20;
    let (left, right) = (w as i64 / 5 + shift, w as i64 * 4 / 5 + shift);
    let normal = rand_distr::Normal::new(0.0, cfg.noise.max(0.0)).expect("finite std");
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let inside = y >= top && y < bottom && (x as i64) >= left && (x as i64) < right;
            let base = if !inside {
                proto.background
            } else if y < waist {
                if proto.striped && ((y - top) / proto.stripe_period) % 2 == 1 {
                    proto.stripe
                } else {
                    proto.torso
                }
            } else {
                proto.legs
            };
            for c in 0..3 {
                let noise: f64 = if cfg.noise > 0.0 { rng.sample(normal) } else { 0.0 };
                let v = base[c] * cam.gain[c] + cam.offset + noise;
                data[(c * h + y) * w + x] = quantize(v);
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("shape matches data")
}

/// Deterministic synthetic person images: each pid has a colour/stripe
/// prototype, each camera a brightness and colour shift, each view a small
/// horizontal jitter and pixel noise.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.num_pids < 2 || cfg.cams < 2 {
        return Err(cfg_err!("synthetic data needs at least 2 pids and 2 cameras"));
    }
    if cfg.views_per_cam == 0 || cfg.held_out_views > cfg.views_per_cam {
        return Err(cfg_err!(
            "held_out_views ({}) must not exceed views_per_cam ({}), which must be ≥ 1",
            cfg.held_out_views,
            cfg.views_per_cam
        ));
    }
    if cfg.height < 8 || cfg.width < 8 {
        return Err(cfg_err!(
            "synthetic images must be at least 8×8, got {}×{}",
            cfg.height,
            cfg.width
        ));
    }
    let mut rng = stream(cfg.seed, Purpose::Synth, 0);
    let protos: Vec<Prototype> = (0..cfg.num_pids)
        .map(|_| Prototype {
            background: color(&mut rng).map(|v| 0.2 + 0.3 * v),
            torso: color(&mut rng),
            legs: color(&mut rng),
            stripe: color(&mut rng),
            stripe_period: rng.gen_range(2..=5),
            striped: rng.gen_bool(0.5),
        })
        .collect();
    let cams: Vec<CameraShift> = (0..cfg.cams)
        .map(|_| CameraShift {
            gain: [(); 3].map(|_| rng.gen_range(0.85..1.15)),
            offset: rng.gen_range(-0.08..0.08),
        })
        .collect();
    let train_views = cfg.views_per_cam - cfg.held_out_views;
    let mut samples = Vec::with_capacity(cfg.num_pids * cfg.cams * cfg.views_per_cam);
    for (pid, proto) in protos.iter().enumerate() {
        for (cam_id, cam) in cams.iter().enumerate() {
            for view in 0..cfg.views_per_cam {
                let split = if view < train_views {
                    Split::Train
                } else if view == train_views {
                    Split::Query
                } else {
                    Split::Gallery
                };
                samples.push(Sample {
                    image: render(proto, cam, cfg, &mut rng),
                    pid,
                    cam_id,
                    split,
                });
            }
        }
    }
    Ok(Dataset {
        samples,
        height: cfg.height,
        width: cfg.width,
    })
}

// --- image files --------------------------------------------------------

fn to_rgb8(image: &Tensor) -> Result<image::RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    }))
}

fn from_rgb8(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("shape matches data")
}

/// Writes an 8-bit binary PPM (P6).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let rgb = to_rgb8(image)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = image::codecs::pnm::PnmEncoder::new(std::io::BufWriter::new(file)).with_subtype(
        image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary),
    );
    use image::ImageEncoder;
    enc.write_image(rgb.as_raw(), rgb.width(), rgb.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes an 8-bit binary PGM (P5) from row-major `[H, W]` bytes.
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = image::codecs::pnm::PnmEncoder::new(std::io::BufWriter::new(file)).with_subtype(
        image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary),
    );
    use image::ImageEncoder;
    enc.write_image(pixels, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Reads a PPM or PNG file into a `[3, H, W]` tensor.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Data(format!("{}: cannot decode image: {e}", path.display())))?;
    Ok(from_rgb8(&img.to_rgb8()))
}

/// Bilinear resize with half-pixel centres; same-size input is returned
/// unchanged.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (height, width) {
        return image.clone();
    }
    let src = |len: usize, out: usize, i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * len as f64 / out as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    let d = image.data();
    let mut out = vec![0.0; c * height * width];
    for y in 0..height {
        let (y0, y1, fy) = src(h, height, y);
        for x in 0..width {
            let (x0, x1, fx) = src(w, width, x);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * height + y) * width + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[c, height, width], out).expect("shape matches data")
}

// --- manifests ----------------------------------------------------------

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub pid: usize,
    pub cam_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct RawRow {
    path: String,
    pid: String,
    cam_id: String,
    split: String,
}

impl Manifest {
    /// Parses `path,pid,cam_id,split`. Problems are collected per row.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::Load(vec![format!("manifest header: {e}")]))?
            .clone();
        let expected = ["path", "pid", "cam_id", "split"];
        if !text.trim().is_empty() && headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Load(vec![format!(
                "manifest header must be `{}`, got `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )]));
        }
        let mut entries = Vec::new();
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        for (i, row) in reader.deserialize::<RawRow>().enumerate() {
            let line = i + 2;
            let row = match row {
                Ok(r) => r,
                Err(e) => {
                    problems.push(format!("row {line}: {e}"));
                    continue;
                }
            };
            let int = |field: &str, v: &str| -> std::result::Result<usize, String> {
                v.parse::<i64>()
                    .map_err(|_| format!("row {line}: {field} `{v}` is not an integer"))
                    .and_then(|n| {
                        usize::try_from(n).map_err(|_| format!("row {line}: {field} {n} is negative"))
                    })
            };
            let pid = int("pid", &row.pid);
            let cam = int("cam_id", &row.cam_id);
            let split = row.split.parse::<Split>().map_err(|e| format!("row {line}: {e}"));
            match (pid, cam, split) {
                (Ok(pid), Ok(cam_id), Ok(split)) => {
                    if !seen.insert(row.path.clone()) {
                        problems.push(format!("row {line}: duplicate path `{}`", row.path));
                        continue;
                    }
                    entries.push(ManifestEntry {
                        path: row.path,
                        pid,
                        cam_id,
                        split,
                    });
                }
                (p, c, s) => problems.extend([p.err(), c.err(), s.err()].into_iter().flatten()),
            }
        }
        if problems.is_empty() {
            Ok(Self { root, entries })
        } else {
            Err(Error::Load(problems))
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_path(path).map_err(|e| csv_io(path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Loads every manifest image, resizing to `height × width`. All failures
/// are reported together.
pub fn load_dataset(manifest: &Manifest, height: usize, width: usize) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut problems = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let path = manifest.root.join(&e.path);
        match read_image(&path) {
            Ok(img) => samples.push(Sample {
                image: resize_bilinear(&img, height, width),
                pid: e.pid,
                cam_id: e.cam_id,
                split: e.split,
            }),
            Err(err) => problems.push(format!("row {}: {err}", i + 2)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Load(problems));
    }
    Ok(Dataset {
        samples,
        height,
        width,
    })
}

/// Writes every sample as a PPM under `root/images/<split>/` plus
/// `root/manifest.csv`. Returns the manifest path.
pub fn export_dataset(dataset: &Dataset, root: &Path) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(dataset.len());
    let mut counters: BTreeMap<(usize, usize, Split), usize> = BTreeMap::new();
    for s in &dataset.samples {
        let dir = root.join("images").join(s.split.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let n = counters.entry((s.pid, s.cam_id, s.split)).or_default();
        let name = format!("{:04}_c{}_{:03}.ppm", s.pid, s.cam_id, *n);
        *n += 1;
        write_ppm(&dir.join(&name), &s.image)?;
        entries.push(ManifestEntry {
            path: format!("images/{}/{name}", s.split.name()),
            pid: s.pid,
            cam_id: s.cam_id,
            split: s.split,
        });
    }
    let manifest = Manifest {
        root: root.to_path_buf(),
        entries,
    };
    let path = root.join("manifest.csv");
    manifest.write(&path)?;
    Ok(path)
}

// --- PK sampling --------------------------------------------------------

/// One PK batch of dataset indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub pids: Vec<usize>,
    /// True where a sample was drawn again because its pid had fewer than
    /// `K` distinct samples.
    pub repeated: Vec<bool>,
}

/// Identity-balanced sampler over the training split.
#[derive(Clone, Debug)]
pub struct PkSampler {
    p: usize,
    k: usize,
    seed: u64,
    by_pid: Vec<(usize, Vec<usize>)>,
}

impl PkSampler {
    pub fn new(dataset: &Dataset, p: usize, k: usize, seed: u64) -> Result<Self> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            if s.split == Split::Train {
                groups.entry(s.pid).or_default().push(i);
            }
        }
        Self::from_groups(groups.into_iter().collect(), p, k, seed)
    }

    pub fn from_groups(by_pid: Vec<(usize, Vec<usize>)>, p: usize, k: usize, seed: u64) -> Result<Self> {
        if p < 1 || k < 1 {
            return Err(cfg_err!("P and K must be positive, got P={p}, K={k}"));
        }
        if by_pid.len() < p {
            return Err(cfg_err!(
                "PK sampling needs at least P={p} identities, the training split has {}",
                by_pid.len()
            ));
        }
        Ok(Self { p, k, seed, by_pid })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_pid.len() / self.p
    }

    /// Batches of `epoch`; a pure function of the seed and epoch index.
    pub fn epoch(&self, epoch: usize) -> Vec<Batch> {
        let mut rng = stream(self.seed, Purpose::Epoch, epoch as u64);
        let mut order: Vec<usize> = (0..self.by_pid.len()).collect();
        order.shuffle(&mut rng);
        order
            .chunks_exact(self.p)
            .map(|group| {
                let mut batch = Batch {
                    indices: Vec::with_capacity(self.batch_size()),
                    pids: Vec::with_capacity(self.batch_size()),
                    repeated: Vec::with_capacity(self.batch_size()),
                };
                for &g in group {
                    let (pid, members) = &self.by_pid[g];
                    let mut pool = members.clone();
                    pool.shuffle(&mut rng);
                    for j in 0..self.k {
                        let (idx, rep) = if j < pool.len() {
                            (pool[j], false)
                        } else {
                            (pool[rng.gen_range(0..pool.len())], true)
                        };
                        batch.indices.push(idx);
                        batch.pids.push(*pid);
                        batch.repeated.push(rep);
                    }
                }
                batch
            })
            .collect()
    }
}

// --- augmentation -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    /// Reflect padding before the random crop; 0 disables cropping.
    pub crop_pad: usize,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_pad: 10,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.33),
        }
    }
}

impl AugmentPolicy {
    /// A policy that leaves every image untouched.
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            crop_pad: 0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }
}

pub fn hflip(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    for row in 0..c * h {
        for x in 0..w {
            out[row * w + x] = d[row * w + w - 1 - x];
        }
    }
    Tensor::new(s, out).expect("shape matches data")
}

fn reflect(i: i64, len: usize) -> usize {
    let n = len as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Window of the reflect-padded image starting at `(top, left)` in padded
/// coordinates.
pub fn pad_crop(image: &Tensor, pad: usize, top: usize, left: usize) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = reflect(y as i64 + top as i64 - pad as i64, h);
            for x in 0..w {
                let sx = reflect(x as i64 + left as i64 - pad as i64, w);
                out[(ch * h + y) * w + x] = d[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(s, out).expect("shape matches data")
}

/// Fills the `eh × ew` rectangle at `(top, left)` with `fill[c]`.
pub fn erase(image: &Tensor, top: usize, left: usize, eh: usize, ew: usize, fill: [f64; 3]) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = image.clone();
    let d = out.data_mut();
    for (ch, &f) in fill.iter().enumerate().take(c) {
        for y in top..(top + eh).min(h) {
            for x in left..(left + ew).min(w) {
                d[(ch * h + y) * w + x] = f;
            }
        }
    }
    out
}

/// Flip, pad-and-crop, then random erasing filled with `fill`.
pub fn augment(image: &Tensor, rng: &mut ChaCha8Rng, policy: &AugmentPolicy, fill: [f64; 3]) -> Tensor {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let mut out = if policy.flip_prob > 0.0 && rng.gen::<f64>() < policy.flip_prob {
        hflip(image)
    } else {
        image.clone()
    };
    if policy.crop_pad > 0 {
        let top = rng.gen_range(0..=2 * policy.crop_pad);
        let left = rng.gen_range(0..=2 * policy.crop_pad);
        out = pad_crop(&out, policy.crop_pad, top, left);
    }
    if policy.erase_prob > 0.0 && rng.gen::<f64>() < policy.erase_prob {
        let area = (h * w) as f64;
        let (a_lo, a_hi) = policy.erase_area;
        let (r_lo, r_hi) = (policy.erase_aspect.0.ln(), policy.erase_aspect.1.ln());
        for _ in 0..100 {
            let target = area * if a_hi > a_lo { rng.gen_range(a_lo..=a_hi) } else { a_lo };
            let aspect = if r_hi > r_lo { rng.gen_range(r_lo..=r_hi) } else { r_lo }.exp();
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh >= 1 && ew >= 1 && eh <= h && ew <= w {
                let top = rng.gen_range(0..=h - eh);
                let left = rng.gen_range(0..=w - ew);
                out = erase(&out, top, left, eh, ew, fill);
                break;
            }
        }
    }
    out
}

// --- normalization ------------------------------------------------------

/// Per-channel statistics used to standardize images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("cannot compute channel statistics of an empty split".into()));
        }
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0usize;
        for s in samples {
            let per = s.image.numel() / 3;
            for (c, chunk) in s.image.data().chunks(per).enumerate() {
                sum[c] += chunk.iter().sum::<f64>();
                sq[c] += chunk.iter().map(|v| v * v).sum::<f64>();
            }
            n += per;
        }
        let n = n as f64;
        let mean = sum.map(|v| v / n);
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6);
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, image: &Tensor) -> Tensor {
        let per = image.numel() / 3;
        let mut out = image.clone();
        for (c, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Stacks `[3, H, W]` images into `[B, 3, H, W]`.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "batch images differ in shape: {shape:?} vs {:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}
