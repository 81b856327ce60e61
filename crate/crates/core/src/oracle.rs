//! Brute-force reference implementations.
//!
//! Each function recomputes a pipeline stage by direct enumeration, sharing
//! no code with the production path beyond geometry primitives. The property
//! suites and the unit tests compare against these.

use crate::geometry::{BevConfig, CameraParams, DepthBins};
use crate::hungarian::CostMatrix;
use crate::nn::Extent;
use crate::numerics::Tensor;
use crate::predictor::{Candidate, CandidateSet, Detection};
use crate::metrics::MatchOutcome;
use crate::scene::{ObjectBox, PointCloud};

/// Exhaustive scatter over `(pixel, bin)` pairs.
pub fn ray_stream_oracle(
    context: &Tensor,
    probs: &Tensor,
    cam: &CameraParams,
    bins: &DepthBins,
    bev: &BevConfig,
    extent: Extent,
    stride: usize,
) -> Tensor {
    let c = context.shape()[1];
    let mut out = Tensor::zeros(&[bev.cells(), c]);
    for y in 0..extent.h {
        for x in 0..extent.w {
            let p = y * extent.w + x;
            let (u, v) = (stride as f64 * (x as f64 + 0.5), stride as f64 * (y as f64 + 0.5));
            for d in 0..bins.count {
                let world = cam.unproject(u, v, bins.d_min + (d as f64 + 0.5) * bins.width()).unwrap();
                let Some((gx, gy)) = bev.bev_index(world[0], world[1]) else { continue };
                for ch in 0..c {
                    let cell = gx * bev.n + gy;
                    let add = context.get(&[p, ch]) * probs.get(&[p, d]);
                    out.set(&[cell, ch], out.get(&[cell, ch]) + add);
                }
            }
        }
    }
    out
}

/// Per-point loop: camera-averaged nearest-pixel feature, then per-cell mean.
pub fn point_stream_oracle(pc: &PointCloud, hr: &[Tensor], cams: &[CameraParams], bev: &BevConfig) -> Tensor {
    let c = hr.first().map_or(0, |t| t.shape()[1]);
    let mut sums = vec![vec![0.0; c]; bev.cells()];
    let mut counts = vec![0usize; bev.cells()];
    for p in &pc.points {
        let Some((gx, gy)) = bev.bev_index(p[0], p[1]) else { continue };
        let mut acc = vec![0.0; c];
        let mut seen = 0;
        for (cam, feat) in cams.iter().zip(hr) {
            if let Some(q) = cam.project(&[p[0], p[1], p[2]]) {
                let row = q.v.floor() as usize * cam.width + q.u.floor() as usize;
                for ch in 0..c {
                    acc[ch] += feat.get(&[row, ch]);
                }
                seen += 1;
            }
        }
        if seen == 0 {
            continue;
        }
        let cell = gx * bev.n + gy;
        for ch in 0..c {
            sums[cell][ch] += acc[ch] / seen as f64;
        }
        counts[cell] += 1;
    }
    let mut out = Tensor::zeros(&[bev.cells(), c]);
    for cell in 0..bev.cells() {
        if counts[cell] > 0 {
            for ch in 0..c {
                out.set(&[cell, ch], sums[cell][ch] / counts[cell] as f64);
            }
        }
    }
    out
}

/// Candidate selection by exhaustive scans: eligibility compares each cell
/// against every other cell within Chebyshev distance 1, and the ranking is
/// built by repeated linear selection of the best remaining cell.
pub fn select_candidates_oracle(heat: &Tensor, n: usize, k: usize) -> CandidateSet {
    let classes = heat.shape()[1];
    let score = |gx: usize, gy: usize| -> (f64, usize) {
        let mut best = (heat.get(&[gx * n + gy, 0]), 0);
        for c in 1..classes {
            let v = heat.get(&[gx * n + gy, c]);
            if v > best.0 {
                best = (v, c);
            }
        }
        best
    };
    let mut pool = Vec::new();
    for gx in 0..n {
        for gy in 0..n {
            let s = score(gx, gy).0;
            let dominated = (0..n).any(|x| {
                (0..n).any(|y| {
                    let near = x.abs_diff(gx) <= 1 && y.abs_diff(gy) <= 1 && (x, y) != (gx, gy);
                    near && score(x, y).0 > s
                })
            });
            if !dominated {
                pool.push((gx, gy));
            }
        }
    }
    let mut items = Vec::new();
    while items.len() < k && !pool.is_empty() {
        let mut pick = 0;
        for i in 1..pool.len() {
            let (a, b) = (pool[i], pool[pick]);
            let (sa, sb) = (score(a.0, a.1).0, score(b.0, b.1).0);
            if sa > sb || (sa == sb && a < b) {
                pick = i;
            }
        }
        let (gx, gy) = pool.remove(pick);
        let (s, class_id) = score(gx, gy);
        items.push(Candidate {
            gx,
            gy,
            class_id,
            score: s,
        });
    }
    CandidateSet { items }
}

/// Minimum cost over every injective assignment of `min(rows, cols)` pairs,
/// with the lexicographically smallest optimal pair list.
pub fn assignment_oracle(c: &CostMatrix) -> (f64, Vec<(usize, usize)>) {
    fn walk(
        c: &CostMatrix,
        row: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        found: &mut Vec<(f64, Vec<(usize, usize)>)>,
    ) {
        let target = c.rows.min(c.cols);
        if current.len() == target {
            found.push((current.iter().map(|&(r, k)| c.at(r, k)).sum(), current.clone()));
            return;
        }
        if c.rows - row < target - current.len() {
            return;
        }
        for k in 0..c.cols {
            if !used[k] {
                used[k] = true;
                current.push((row, k));
                walk(c, row + 1, used, current, found);
                current.pop();
                used[k] = false;
            }
        }
        walk(c, row + 1, used, current, found);
    }
    let mut found = Vec::new();
    walk(c, 0, &mut vec![false; c.cols], &mut Vec::new(), &mut found);
    let best = found.iter().map(|f| f.0).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * best.abs().max(1.0);
    let pairs = found
        .iter()
        .filter(|f| (f.0 - best).abs() <= tol)
        .map(|f| f.1.clone())
        .min()
        .unwrap_or_default();
    (if found.is_empty() { 0.0 } else { best }, pairs)
}

/// Greedy matching from the full distance table: each detection takes the
/// closest free same-class ground truth after sorting all candidates.
pub fn match_detections_oracle(dets: &[Detection], gts: &[ObjectBox], threshold: f64) -> MatchOutcome {
    let mut taken = vec![false; gts.len()];
    let mut out = MatchOutcome { is_tp: vec![false; dets.len()], pairs: Vec::new() };
    for (i, d) in dets.iter().enumerate() {
        let mut options: Vec<(f64, usize)> = gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class_id == d.class_id)
            .map(|(j, g)| (((d.center[0] - g.center[0]).powi(2) + (d.center[1] - g.center[1]).powi(2)).sqrt(), j))
            .collect();
        options.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some(&(dist, j)) = options.iter().find(|o| !taken[o.1]) {
            if dist < threshold {
                taken[j] = true;
                out.is_tp[i] = true;
                out.pairs.push((i, j));
            }
        }
    }
    out
}

/// AP by walking the precision/recall polyline segment by segment at each
/// recall level in `0.11, …, 1.00`.
pub fn average_precision_oracle(labels: &[bool], n_gt: usize) -> f64 {
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &l in labels {
        if l {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut total = 0.0;
    for i in 11..=100 {
        let r = i as f64 / 100.0;
        let p = if points.is_empty() || r > points[points.len() - 1].0 {
            0.0
        } else if r < points[0].0 {
            points[0].1
        } else {
            let mut k = 0;
            for (idx, pt) in points.iter().enumerate() {
                if pt.0 <= r {
                    k = idx;
                }
            }
            if points[k].0 == r || k + 1 == points.len() {
                points[k].1
            } else {
                let (a, b) = (points[k], points[k + 1]);
                a.1 + (b.1 - a.1) * (r - a.0) / (b.0 - a.0)
            }
        };
        total += (p - 0.1).max(0.0);
    }
    total / 90.0 / 0.9
}
