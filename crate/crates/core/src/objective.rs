//! Training objective: label-smoothed cross-entropy plus soft-margin
//! triplet loss on each supervised feature, summed over all heads.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, dim_err, Error, Result};
use crate::nn::{Forward, Init};
use crate::tensor::{Tensor, Var};

pub const LABEL_SMOOTHING: f64 = 0.1;

/// One supervised feature. The declaration order is the fixed order used
/// for summing losses and for concatenating embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadId {
    /// `f̂_c`: CNN backbone global vector.
    CnnGlobal,
    /// `f̂_t`: ViT class token.
    VitGlobal,
    /// `f'_(c,0)`: aligned CNN token.
    CnnAligned,
    /// `f'_(t,0)`: aligned ViT token.
    VitAligned,
    /// `f'_(c,L)`: fused CNN token.
    CnnFused,
    /// `f'_(t,L)`: fused ViT token.
    VitFused,
}

impl HeadId {
    pub const ALL: [HeadId; 6] = [
        HeadId::CnnGlobal,
        HeadId::VitGlobal,
        HeadId::CnnAligned,
        HeadId::VitAligned,
        HeadId::CnnFused,
        HeadId::VitFused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadId::CnnGlobal => "c_hat",
            HeadId::VitGlobal => "t_hat",
            HeadId::CnnAligned => "c_0",
            HeadId::VitAligned => "t_0",
            HeadId::CnnFused => "c_L",
            HeadId::VitFused => "t_L",
        }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Anchor/positive/negative batch indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletSet {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Label-smoothed cross-entropy of `features · Wᵀ` against `labels`,
/// averaged over the batch. `features: [B, D]`, `weight: [J, D]`.
pub fn ce_label_smooth<'t>(
    features: Var<'t>,
    weight: Var<'t>,
    labels: &[usize],
    epsilon: f64,
) -> Result<Var<'t>> {
    let fs = features.shape();
    let ws = weight.shape();
    if fs.len() != 2 || ws.len() != 2 || fs[1] != ws[1] || fs[0] != labels.len() {
        return Err(dim_err!(
            "cross-entropy: features {fs:?}, classifier {ws:?}, {} labels",
            labels.len()
        ));
    }
    let (b, j) = (fs[0], ws[0]);
    if j < 2 {
        return Err(cfg_err!("cross-entropy needs at least two classes, got {j}"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= j) {
        return Err(Error::Data(format!("label {bad} out of range for {j} classes")));
    }
    let mut target = Tensor::full(&[b, j], epsilon / j as f64);
    for (i, &y) in labels.iter().enumerate() {
        target.data_mut()[i * j + y] += 1.0 - epsilon;
    }
    let log_p = features.matmul(weight.transpose(0, 1)?)?.log_softmax();
    let target = features.tape().constant(target);
    Ok(log_p.mul(target)?.sum().scale(-1.0 / b as f64))
}

fn squared_distances(features: &Tensor) -> Vec<Vec<f64>> {
    let (b, d) = (features.shape()[0], features.shape()[1]);
    let rows: Vec<&[f64]> = features.data().chunks(d).collect();
    (0..b)
        .map(|i| {
            (0..b)
                .map(|j| rows[i].iter().zip(rows[j]).map(|(x, y)| (x - y).powi(2)).sum())
                .collect()
        })
        .collect()
}

/// Batch-hard mining: for each anchor the farthest same-pid sample and the
/// nearest different-pid sample (squared L2). Ties go to the lower index.
pub fn batch_hard_mine(features: &Tensor, pids: &[usize]) -> Result<TripletSet> {
    if features.ndim() != 2 || features.shape()[0] != pids.len() {
        return Err(dim_err!(
            "mining needs [B, D] features with B = {} pids, got {:?}",
            pids.len(),
            features.shape()
        ));
    }
    let dist = squared_distances(features);
    let mut set = TripletSet::default();
    for (a, &pid) in pids.iter().enumerate() {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for (j, &other) in pids.iter().enumerate() {
            let d = dist[a][j];
            if j != a && other == pid {
                if pos.map_or(true, |(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if other != pid && neg.map_or(true, |(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let (Some((p, _)), Some((n, _))) = (pos, neg) else {
            return Err(Error::Data(format!(
                "triplet mining: pid {pid} at index {a} lacks a positive or a negative in the batch"
            )));
        };
        set.anchors.push(a);
        set.positives.push(p);
        set.negatives.push(n);
    }
    Ok(set)
}

/// Mean over triplets of `ln(1 + exp(‖a − p‖² − ‖a − n‖²))`.
pub fn triplet_softmargin<'t>(triplets: &TripletSet, features: Var<'t>) -> Result<Var<'t>> {
    if triplets.is_empty() {
        return Err(Error::Data("empty triplet set".into()));
    }
    let a = features.gather_rows(&triplets.anchors)?;
    let p = features.gather_rows(&triplets.positives)?;
    let n = features.gather_rows(&triplets.negatives)?;
    let sq = |x: Var<'t>, y: Var<'t>| -> Result<Var<'t>> {
        let diff = x.sub(y)?;
        diff.mul(diff)?.sum_last()
    };
    let margin = sq(a, p)?.sub(sq(a, n)?)?;
    Ok(margin.softplus().mean())
}

/// Loss terms of one head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLoss {
    pub head: HeadId,
    pub ce: f64,
    pub tri: f64,
}

/// Total loss and its per-head breakdown.
#[derive(Clone, Debug)]
pub struct LossOutput<'t> {
    pub total: Var<'t>,
    pub breakdown: Vec<HeadLoss>,
}

impl LossOutput<'_> {
    pub fn ce_sum(&self) -> f64 {
        self.breakdown.iter().map(|h| h.ce).sum()
    }

    pub fn tri_sum(&self) -> f64 {
        self.breakdown.iter().map(|h| h.tri).sum()
    }
}

/// Per-head classifier (with optional BN neck) and the summed objective.
pub struct Objective {
    pub heads: Vec<(HeadId, usize)>,
    pub num_classes: usize,
    pub bn_neck: bool,
    pub epsilon: f64,
}

impl Objective {
    pub fn prefix(head: HeadId) -> String {
        format!("heads.{}", head.name())
    }

    pub fn init(&self, init: &mut Init<'_>) -> Result<()> {
        for &(head, dim) in &self.heads {
            let p = Self::prefix(head);
            if self.bn_neck {
                init.batch_norm(&format!("{p}.bn"), dim)?;
            }
            let w = init.normal(&[self.num_classes, dim], 0.001);
            init.param(format!("{p}.classifier.weight"), w)?;
        }
        Ok(())
    }

    /// Cross-entropy + triplet for a single head.
    pub fn head_loss<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        head: HeadId,
        features: Var<'t>,
        labels: &[usize],
        pids: &[usize],
    ) -> Result<(Var<'t>, HeadLoss)> {
        let p = Self::prefix(head);
        let triplets = batch_hard_mine(&features.value(), pids)?;
        let tri = triplet_softmargin(&triplets, features)?;
        let cls_in = if self.bn_neck {
            fwd.batch_norm(&format!("{p}.bn"), features)?
        } else {
            features
        };
        let w = fwd.param(&format!("{p}.classifier.weight"))?;
        let ce = ce_label_smooth(cls_in, w, labels, self.epsilon)?;
        let record = HeadLoss {
            head,
            ce: ce.item(),
            tri: tri.item(),
        };
        Ok((ce.add(tri)?, record))
    }

    /// Unweighted sum of every head's loss, in fixed head order whatever the
    /// order of `features`.
    pub fn total_loss<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        features: &[(HeadId, Var<'t>)],
        labels: &[usize],
        pids: &[usize],
    ) -> Result<LossOutput<'t>> {
        let mut total: Option<Var<'t>> = None;
        let mut breakdown = Vec::with_capacity(self.heads.len());
        let mut order: Vec<HeadId> = self.heads.iter().map(|h| h.0).collect();
        order.sort();
        for head in order {
            let feat = features
                .iter()
                .find(|(h, _)| *h == head)
                .map(|(_, v)| *v)
                .ok_or_else(|| cfg_err!("supervised feature `{head}` is missing"))?;
            let (loss, record) = self.head_loss(fwd, head, feat, labels, pids)?;
            total = Some(match total {
                Some(t) => t.add(loss)?,
                None => loss,
            });
            breakdown.push(record);
        }
        let total = total.ok_or_else(|| cfg_err!("objective has no heads"))?;
        Ok(LossOutput { total, breakdown })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn uniform_logits_give_ln_j() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[3, 5]));
        let w2 = tape.constant(Tensor::ones(&[2, 5]));
        let ce = ce_label_smooth(f, w2, &[0, 1, 1], 0.0).unwrap().item();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        let w4 = tape.constant(Tensor::ones(&[4, 5]));
        for eps in [0.0, 0.1, 0.5] {
            let ce = ce_label_smooth(f, w4, &[0, 3, 2], eps).unwrap().item();
            assert!((ce - 4f64.ln()).abs() < 1e-12, "eps {eps}: {ce}");
        }
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::vector(&[1.0]).reshape(&[1, 1]).unwrap());
        let w = tape.constant(Tensor::new(&[2, 1], vec![1e3, -1e3]).unwrap());
        let ce = ce_label_smooth(f, w, &[0], 0.0).unwrap().item();
        assert!(ce < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_a_data_error() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[1, 2]));
        let w = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(ce_label_smooth(f, w, &[3], 0.1), Err(Error::Data(_))));
    }

    #[test]
    fn singleton_pid_violates_mining_contract() {
        let f = Tensor::zeros(&[3, 2]);
        assert!(matches!(batch_hard_mine(&f, &[0, 0, 1]), Err(Error::Data(_))));
    }

    #[test]
    fn triplet_anchor_values() {
        let tape = Tape::new();
        // a = 0, p at squared distance 2, n at squared distance 1.
        let f = Tensor::new(&[3, 2], vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let set = TripletSet {
            anchors: vec![0],
            positives: vec![1],
            negatives: vec![2],
        };
        let loss = triplet_softmargin(&set, tape.constant(f)).unwrap().item();
        assert!((loss - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((loss - 1.3133).abs() < 1e-4);

        let same = Tensor::new(&[3, 2], vec![0.0, 0.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        let loss = triplet_softmargin(&set, tape.constant(same)).unwrap().item();
        assert!((loss - 2f64.ln()).abs() < 1e-12);

        let far = Tensor::new(&[3, 2], vec![0.0, 0.0, 1.0, 0.0, 1e3, 0.0]).unwrap();
        assert!(triplet_softmargin(&set, tape.constant(far)).unwrap().item() < 1e-12);
    }
}
