//! Retrieval evaluation and attention-map export.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{stack, ChannelStats, Sample};
use crate::error::{Error, Result};
use crate::model::FusionReid;
use crate::nn::{AttentionRecord, Forward, Unit};
use crate::tensor::{ParamStore, Tape, Tensor};

const EXTRACT_CHUNK: usize = 32;

/// A retrieval embedding: every supervised feature concatenated in head
/// order, then L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub feature: Vec<f64>,
    pub pid: usize,
    pub cam_id: usize,
}

pub fn extract_features(
    model: &FusionReid,
    store: &mut ParamStore,
    stats: &ChannelStats,
    samples: &[&Sample],
) -> Result<Vec<EmbeddingRecord>> {
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EXTRACT_CHUNK) {
        let images: Vec<Tensor> = chunk.iter().map(|s| stats.normalize(&s.image)).collect();
        let cams: Vec<usize> = chunk.iter().map(|s| s.cam_id).collect();
        let tape = Tape::new();
        let mut fwd = Forward::eval(&tape, store);
        let out = model.forward(&mut fwd, tape.constant(stack(&images)?), &cams)?;
        let parts: Vec<_> = out.features.iter().map(|(_, v)| v.value()).collect();
        for (i, s) in chunk.iter().enumerate() {
            let mut feature = Vec::with_capacity(model.embedding_dim());
            for p in &parts {
                let d = p.shape()[1];
                feature.extend_from_slice(&p.data()[i * d..(i + 1) * d]);
            }
            let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                feature.iter_mut().for_each(|v| *v /= norm);
            }
            records.push(EmbeddingRecord {
                feature,
                pid: s.pid,
                cam_id: s.cam_id,
            });
        }
    }
    Ok(records)
}

/// Squared Euclidean distances, `[Q, G]`.
pub fn distance_matrix(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord]) -> Result<Tensor> {
    if gallery.is_empty() {
        return Err(Error::Data("the gallery is empty".into()));
    }
    let mut out = Vec::with_capacity(queries.len() * gallery.len());
    for q in queries {
        for g in gallery {
            if q.feature.len() != g.feature.len() {
                return Err(Error::Dimension(format!(
                    "embedding sizes differ: {} vs {}",
                    q.feature.len(),
                    g.feature.len()
                )));
            }
            out.push(q.feature.iter().zip(&g.feature).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    Tensor::new(&[queries.len(), gallery.len()], out)
}

/// Mean precision at the relevant ranks; zero if nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[r]` is the fraction of queries matched within the top `r + 1`.
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub skipped: usize,
    #[serde(skip)]
    pub per_query_ap: Vec<f64>,
}

impl EvalReport {
    /// Rank-`k` accuracy (1-based); ranks beyond the gallery saturate.
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc
            .get(k.max(1) - 1)
            .or(self.cmc.last())
            .copied()
            .unwrap_or(0.0)
    }

    pub fn summary(&self) -> String {
        format!(
            "mAP {:.4}  Rank-1 {:.4}  Rank-5 {:.4}  Rank-10 {:.4}  ({} queries, {} skipped)",
            self.map,
            self.rank(1),
            self.rank(5),
            self.rank(10),
            self.num_queries,
            self.skipped
        )
    }
}

/// Identity and camera of one retrieval item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Label {
    pub pid: usize,
    pub cam_id: usize,
}

/// Ranks each gallery by ascending distance (ties by gallery index) after
/// removing items that share both pid and camera with the query.
pub fn evaluate_distances(dist: &Tensor, queries: &[Label], gallery: &[Label]) -> Result<EvalReport> {
    let (nq, ng) = (queries.len(), gallery.len());
    if dist.shape() != [nq, ng] {
        return Err(Error::Dimension(format!(
            "distance matrix is {:?}, expected [{nq}, {ng}]",
            dist.shape()
        )));
    }
    if ng == 0 {
        return Err(Error::Data("the gallery is empty".into()));
    }
    let mut cmc_hits = vec![0usize; ng];
    let mut aps = Vec::with_capacity(nq);
    let mut skipped = 0;
    for (qi, q) in queries.iter().enumerate() {
        let row = &dist.data()[qi * ng..(qi + 1) * ng];
        let mut order: Vec<usize> = (0..ng)
            .filter(|&g| !(gallery[g].pid == q.pid && gallery[g].cam_id == q.cam_id))
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let relevance: Vec<bool> = order.iter().map(|&g| gallery[g].pid == q.pid).collect();
        let Some(first) = relevance.iter().position(|&r| r) else {
            skipped += 1;
            continue;
        };
        aps.push(average_precision(&relevance));
        for hit in &mut cmc_hits[first..] {
            *hit += 1;
        }
    }
    if aps.is_empty() {
        return Err(Error::Eval(format!(
            "none of the {nq} queries has a valid gallery match"
        )));
    }
    let n = aps.len() as f64;
    Ok(EvalReport {
        map: aps.iter().sum::<f64>() / n,
        cmc: cmc_hits.iter().map(|&h| h as f64 / n).collect(),
        num_queries: aps.len(),
        skipped,
        per_query_ap: aps,
    })
}

pub fn evaluate(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord]) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Eval("there are no queries".into()));
    }
    let dist = distance_matrix(queries, gallery)?;
    let label = |r: &EmbeddingRecord| Label {
        pid: r.pid,
        cam_id: r.cam_id,
    };
    evaluate_distances(
        &dist,
        &queries.iter().map(label).collect::<Vec<_>>(),
        &gallery.iter().map(label).collect::<Vec<_>>(),
    )
}

/// Per-head attention of a global token over the `H×W` local grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub record: usize,
    pub branch: &'static str,
    pub unit: &'static str,
    /// `[heads][H·W]`, row-major over the grid; each row sums to one.
    pub heads: Vec<Vec<f64>>,
}

/// Extracts global-token attention over the local tokens from captured
/// weights of the first image. Self-encoding rows also attend to the global
/// token itself; that entry is dropped and the rest renormalized.
pub fn global_token_maps(records: &[AttentionRecord]) -> Vec<AttentionMap> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let s = r.weights.shape();
            let (heads, rows, cols) = (s[1], s[2], s[3]);
            let heads = (0..heads)
                .map(|h| {
                    let row = &r.weights.data()[h * rows * cols..h * rows * cols + cols];
                    match r.unit {
                        Unit::Seu => {
                            let locals = &row[1..];
                            let total: f64 = locals.iter().sum();
                            locals.iter().map(|v| v / total).collect()
                        }
                        Unit::Mfu => row.to_vec(),
                    }
                })
                .collect();
            AttentionMap {
                layer: r.layer,
                record: i,
                branch: r.branch.tag(),
                unit: r.unit.tag(),
                heads,
            }
        })
        .collect()
}

/// Runs one image through the model with attention capture and writes a
/// CSV per (layer, branch, unit) plus a PGM per head. Returns the written
/// files in order.
pub fn export_attention(
    model: &FusionReid,
    store: &mut ParamStore,
    stats: &ChannelStats,
    image: &Tensor,
    cam_id: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (gh, gw) = model.cfg.dmf.grid;
    let tape = Tape::new();
    let mut fwd = Forward::eval(&tape, store);
    fwd.enable_capture();
    let x = stack(&[stats.normalize(image)])?;
    let out = model.forward(&mut fwd, tape.constant(x), &[cam_id])?;
    if out.dmf.is_none() {
        return Err(Error::Usage(
            "attention export needs the fused architecture".into(),
        ));
    }
    let maps = global_token_maps(&fwd.take_captures());
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for m in &maps {
        let stem = format!("layer{}_{}_{}", m.layer, m.branch, m.unit);
        let csv_path = out_dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
        for row in &m.heads {
            w.write_record(row.iter().map(|v| v.to_string()))
                .map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        files.push(csv_path);
        for (h, row) in m.heads.iter().enumerate() {
            let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            let pixels: Vec<u8> = row
                .iter()
                .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
                .collect();
            let pgm = out_dir.join(format!("{stem}_head{h}.pgm"));
            crate::data::write_pgm(&pgm, gh, gw, &pixels)?;
            files.push(pgm);
        }
    }
    Ok(files)
}
