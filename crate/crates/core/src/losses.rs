//! Detection losses: focal classification, L1 box regression, Gaussian
//! heatmap supervision and the weighted training objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BevConfig;
use crate::hungarian::{hungarian_match, CostMatrix, MatchResult};
use crate::numerics::{ops, Graph, Tensor};
use crate::predictor::{encode_box, CandidateSet, BOX_DIM};
use crate::scene::ObjectBox;
use crate::view::{depth_loss, DepthGroundTruth};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Minimum overlap used to size heatmap Gaussians.
pub const HEATMAP_MIN_OVERLAP: f64 = 0.1;
pub const HEATMAP_MIN_RADIUS: usize = 1;

/// Weights of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Auxiliary classification weight.
    pub cls_aux: f64,
    /// Auxiliary box weight.
    pub box_aux: f64,
    pub depth: f64,
    pub heat: f64,
    /// Box weight of the main heads.
    pub box_main: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls_aux: 1.0, box_aux: 0.25, depth: 0.05, heat: 1.0, box_main: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls_aux, self.box_aux, self.depth, self.heat, self.box_main];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

/// Mean focal loss over paired probabilities and binary targets.
pub fn focal_loss(probs: &[f64], targets: &[f64], alpha: f64, gamma: f64) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let s: f64 = probs.iter().zip(targets).map(|(&p, &t)| ops::focal_scalar(p, t, alpha, gamma)).sum();
    s / probs.len() as f64
}

/// Mean absolute difference between two encoded boxes.
pub fn l1_box_loss(pred: &[f64], gt: &[f64]) -> f64 {
    pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len().max(1) as f64
}

/// Focal-style classification cost of predicting class `c` with
/// probability `p`: the positive term minus the negative term.
pub fn class_cost(p: f64) -> f64 {
    ops::focal_scalar(p, 1.0, FOCAL_ALPHA, FOCAL_GAMMA) - ops::focal_scalar(p, 0.0, FOCAL_ALPHA, FOCAL_GAMMA)
}

/// `[K, G]` matching cost between predictions at the candidate cells and
/// ground-truth boxes.
pub fn matching_cost(
    probs: &Tensor,
    boxes: &Tensor,
    cands: &CandidateSet,
    gts: &[ObjectBox],
    bev: &BevConfig,
) -> Result<CostMatrix> {
    let k = cands.len();
    if probs.rows() != k || boxes.rows() != k {
        return Err(Error::dim(format!(
            "matching: {k} candidates, probs {:?}, boxes {:?}",
            probs.shape(),
            boxes.shape()
        )));
    }
    if k > 0 && boxes.last_dim() != BOX_DIM {
        return Err(Error::dim(format!("matching: boxes {:?}", boxes.shape())));
    }
    let n_classes = if k > 0 { probs.last_dim() } else { usize::MAX };
    if let Some(b) = gts.iter().find(|b| b.class_id >= n_classes) {
        return Err(Error::Domain(format!("ground-truth class {} out of range", b.class_id)));
    }
    let data: Vec<f64> = (0..k)
        .into_par_iter()
        .flat_map_iter(|i| {
            let cand = cands.items[i];
            gts.iter().map(move |gt| {
                let target = encode_box(gt, cand.gx, cand.gy, bev);
                class_cost(probs.row(i)[gt.class_id]) + l1_box_loss(boxes.row(i), &target)
            })
        })
        .collect();
    CostMatrix::new(k, gts.len(), data)
}

/// Per-element targets and weights for one set of head outputs.
#[derive(Clone, Debug)]
pub struct HeadTargets {
    /// `[K, N]` one-hot on matched rows.
    pub cls_target: Tensor,
    pub cls_weight: Tensor,
    /// `[K, 10]` encoded ground truth on matched rows.
    pub box_target: Tensor,
    pub box_weight: Tensor,
    pub matching: MatchResult,
}

/// Hungarian-matched targets. Classification averages over all `K·N`
/// elements with unmatched rows as background; regression averages over the
/// components of matched rows only.
pub fn head_targets(
    probs: &Tensor,
    boxes: &Tensor,
    cands: &CandidateSet,
    gts: &[ObjectBox],
    bev: &BevConfig,
) -> Result<HeadTargets> {
    let cost = matching_cost(probs, boxes, cands, gts, bev)?;
    let matching = hungarian_match(&cost)?;
    let k = cands.len();
    let n = probs.shape().get(1).copied().unwrap_or(0);
    let mut cls_target = Tensor::zeros(&[k, n]);
    let cls_weight = Tensor::full(&[k, n], 1.0 / (k * n).max(1) as f64);
    let mut box_target = Tensor::zeros(&[k, BOX_DIM]);
    let mut box_weight = Tensor::zeros(&[k, BOX_DIM]);
    let norm = 1.0 / (BOX_DIM * matching.pairs.len()).max(1) as f64;
    for &(i, j) in &matching.pairs {
        let gt = &gts[j];
        let cand = cands.items[i];
        cls_target.set(&[i, gt.class_id], 1.0);
        let enc = encode_box(gt, cand.gx, cand.gy, bev);
        box_target.data_mut()[i * BOX_DIM..(i + 1) * BOX_DIM].copy_from_slice(&enc);
        box_weight.data_mut()[i * BOX_DIM..(i + 1) * BOX_DIM].fill(norm);
    }
    Ok(HeadTargets { cls_target, cls_weight, box_target, box_weight, matching })
}

/// Classification and box losses of one set of heads, kept separate.
pub fn head_losses<G: Graph>(
    g: &mut G,
    logits: &G::V,
    boxes: &G::V,
    cands: &CandidateSet,
    gts: &[ObjectBox],
    bev: &BevConfig,
) -> Result<(G::V, G::V, MatchResult)> {
    let probs = g.sigmoid(logits)?;
    let t = head_targets(g.value(&probs), g.value(boxes), cands, gts, bev)?;
    let cls = g.focal(&probs, &t.cls_target, &t.cls_weight, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let bx = g.l1(boxes, &t.box_target, &t.box_weight)?;
    Ok((cls, bx, t.matching))
}

/// Auxiliary loss `λ_cls·L_cls + λ_box·L_box` with its own matching.
pub fn aux_loss<G: Graph>(
    g: &mut G,
    logits: &G::V,
    boxes: &G::V,
    cands: &CandidateSet,
    gts: &[ObjectBox],
    bev: &BevConfig,
    w: &LossWeights,
) -> Result<G::V> {
    let (cls, bx, _) = head_losses(g, logits, boxes, cands, gts, bev)?;
    let cls = g.scale(&cls, w.cls_aux)?;
    let bx = g.scale(&bx, w.box_aux)?;
    g.add(&cls, &bx)
}

/// Gaussian radius in cells for a footprint of `h × w` cells so that a
/// box displaced by the radius keeps at least `min_overlap` IoU.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// `[n², N]` target heatmap: per-class Gaussians at the cells holding box
/// centers, merged by maximum. Peaks are exactly 1.
pub fn gaussian_heatmap(gts: &[ObjectBox], bev: &BevConfig, n_classes: usize) -> Result<Tensor> {
    let n = bev.n;
    let mut heat = Tensor::zeros(&[n * n, n_classes]);
    let (sx, sy) = bev.cell_size();
    for b in gts {
        if b.class_id >= n_classes {
            return Err(Error::Domain(format!("ground-truth class {} out of range", b.class_id)));
        }
        let Some((gx, gy)) = bev.bev_index(b.center[0], b.center[1]) else {
            continue;
        };
        let r = (gaussian_radius(b.size[0] / sx, b.size[1] / sy, HEATMAP_MIN_OVERLAP) as usize).max(HEATMAP_MIN_RADIUS);
        let sigma = (2 * r + 1) as f64 / 6.0;
        let ri = r as isize;
        for dx in -ri..=ri {
            for dy in -ri..=ri {
                let (x, y) = (gx as isize + dx, gy as isize + dy);
                if x < 0 || y < 0 || x >= n as isize || y >= n as isize {
                    continue;
                }
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let idx = [x as usize * n + y as usize, b.class_id];
                if v > heat.get(&idx) {
                    heat.set(&idx, v);
                }
            }
        }
    }
    Ok(heat)
}

/// Penalty-reduced focal loss on the heatmap: peaks are positives, other
/// cells are negatives down-weighted by `(1 − target)^4`, normalized by the
/// number of peaks.
pub fn heatmap_loss<G: Graph>(g: &mut G, heat: &G::V, target: &Tensor) -> Result<G::V> {
    let shape = g.shape(heat);
    if shape != target.shape() {
        return Err(Error::dim(format!("heatmap {shape:?} vs target {:?}", target.shape())));
    }
    let peaks = target.map(|t| if t >= 1.0 { 1.0 } else { 0.0 });
    let num_pos = peaks.data().iter().sum::<f64>().max(1.0);
    // α = 0.5 scaled by 2 gives unit weight on both terms.
    let weight = target.map(|t| if t >= 1.0 { 2.0 / num_pos } else { 2.0 * (1.0 - t).powi(4) / num_pos });
    g.focal(heat, &peaks, &weight, 0.5, FOCAL_GAMMA)
}

/// Graph outputs needed for the training objective.
pub struct LossInputs<'a, V> {
    /// `[n², N]` heatmap probabilities.
    pub heat: &'a V,
    pub logits: &'a V,
    pub boxes: &'a V,
    /// Auxiliary heads, absent without the task-specific branch.
    pub aux: Option<(&'a V, &'a V)>,
    pub cands: &'a CandidateSet,
    /// Per-camera depth distributions and their targets.
    pub depth: Vec<(&'a V, &'a DepthGroundTruth)>,
}

/// Scalar value of each weighted term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub heat: f64,
    pub cls: f64,
    pub bbox: f64,
    pub aux: f64,
    pub depth: f64,
    pub total: f64,
}

/// `λ_heat·L_heat + L_cls + λ_box·L_box + L_aux + λ_depth·L_depth`.
pub fn total_loss<G: Graph>(
    g: &mut G,
    inputs: &LossInputs<'_, G::V>,
    gts: &[ObjectBox],
    bev: &BevConfig,
    w: &LossWeights,
) -> Result<(G::V, LossBreakdown)> {
    let n_classes = g.shape(inputs.heat)[1];
    let target = gaussian_heatmap(gts, bev, n_classes)?;
    let heat = heatmap_loss(g, inputs.heat, &target)?;
    let heat = g.scale(&heat, w.heat)?;
    let (cls, bx, _) = head_losses(g, inputs.logits, inputs.boxes, inputs.cands, gts, bev)?;
    let bx = g.scale(&bx, w.box_main)?;
    let mut br = LossBreakdown {
        heat: g.value(&heat).item()?,
        cls: g.value(&cls).item()?,
        bbox: g.value(&bx).item()?,
        ..LossBreakdown::default()
    };
    let mut total = g.add(&heat, &cls)?;
    total = g.add(&total, &bx)?;
    if let Some((al, ab)) = inputs.aux {
        let aux = aux_loss(g, al, ab, inputs.cands, gts, bev, w)?;
        br.aux = g.value(&aux).item()?;
        total = g.add(&total, &aux)?;
    }
    if !inputs.depth.is_empty() {
        let mut sum: Option<G::V> = None;
        for (probs, gt) in &inputs.depth {
            let l = depth_loss(g, probs, gt)?;
            sum = Some(match sum {
                Some(s) => g.add(&s, &l)?,
                None => l,
            });
        }
        let d = g.scale(&sum.expect("non-empty"), w.depth / inputs.depth.len() as f64)?;
        br.depth = g.value(&d).item()?;
        total = g.add(&total, &d)?;
    }
    br.total = g.value(&total).item()?;
    Ok((total, br))
}
