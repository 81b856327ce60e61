//! Center-distance detection metrics: AP over distance thresholds, true
//! positive error statistics and the composite detection score.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::predictor::Detection;
use crate::scene::ObjectBox;

/// Center-distance thresholds in meters.
pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold used for the true-positive error statistics.
pub const TP_THRESHOLD: f64 = 2.0;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;
const RECALL_POINTS: usize = 101;

/// Labels of a greedy matching pass, in detection order.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome {
    pub is_tp: Vec<bool>,
    /// `(detection, ground truth)` for every true positive.
    pub pairs: Vec<(usize, usize)>,
}

fn center_distance(d: &Detection, g: &ObjectBox) -> f64 {
    (d.center[0] - g.center[0]).hypot(d.center[1] - g.center[1])
}

/// Greedy matching of detections (descending score order) to the nearest
/// unmatched ground truth of the same class closer than `threshold`.
pub fn match_detections(dets: &[Detection], gts: &[ObjectBox], threshold: f64) -> MatchOutcome {
    let mut taken = vec![false; gts.len()];
    let mut is_tp = Vec::with_capacity(dets.len());
    let mut pairs = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_id != d.class_id {
                continue;
            }
            let dist = center_distance(d, g);
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((j, dist));
            }
        }
        match best {
            Some((j, dist)) if dist < threshold => {
                taken[j] = true;
                pairs.push((i, j));
                is_tp.push(true);
            }
            _ => is_tp.push(false),
        }
    }
    MatchOutcome { is_tp, pairs }
}

/// Piecewise-linear interpolation of `(xs, ys)` at `x`, holding the first
/// value to the left and returning `right` beyond the last abscissa. With
/// repeated abscissae the last of the run wins.
fn interp(x: f64, xs: &[f64], ys: &[f64], right: f64) -> f64 {
    let last = xs.len() - 1;
    if x < xs[0] {
        return ys[0];
    }
    if x > xs[last] {
        return right;
    }
    if x == xs[last] {
        return ys[last];
    }
    let j = xs.partition_point(|&v| v <= x) - 1;
    if xs[j] == x {
        return ys[j];
    }
    ys[j] + (ys[j + 1] - ys[j]) * (x - xs[j]) / (xs[j + 1] - xs[j])
}

/// Precision sampled at 101 evenly spaced recall levels.
pub fn precision_curve(labels: &[bool], n_gt: usize) -> Vec<f64> {
    if labels.is_empty() || n_gt == 0 {
        return vec![0.0; RECALL_POINTS];
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut recall = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    for &l in labels {
        if l {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / n_gt as f64);
        precision.push(tp / (tp + fp));
    }
    (0..RECALL_POINTS)
        .map(|i| interp(i as f64 / (RECALL_POINTS - 1) as f64, &recall, &precision, 0.0))
        .collect()
}

/// Area under the precision curve above the recall and precision floors,
/// renormalized to `[0, 1]`. `None` when there is nothing to evaluate.
pub fn average_precision(labels: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 && labels.is_empty() {
        return None;
    }
    let curve = precision_curve(labels, n_gt);
    let start = (100.0 * MIN_RECALL).round() as usize + 1;
    let tail = &curve[start..];
    let mean = tail.iter().map(|p| (p - MIN_PRECISION).max(0.0)).sum::<f64>() / tail.len() as f64;
    Some((mean / (1.0 - MIN_PRECISION)).min(1.0))
}

/// Mean translation, scale, orientation and velocity errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
}

impl TpErrors {
    /// Reported when nothing matched.
    pub const WORST: TpErrors = TpErrors { ate: 1.0, ase: 1.0, aoe: 1.0, ave: 1.0 };

    pub fn as_array(&self) -> [f64; 4] {
        [self.ate, self.ase, self.aoe, self.ave]
    }
}

/// IoU of two boxes sharing center and heading.
pub fn aligned_iou(a: [f64; 3], b: [f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let union = a.iter().product::<f64>() + b.iter().product::<f64>() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Absolute heading difference folded into `[0, π]`.
pub fn yaw_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

pub fn tp_errors(pairs: &[(&Detection, &ObjectBox)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let n = pairs.len() as f64;
    let mut e = TpErrors { ate: 0.0, ase: 0.0, aoe: 0.0, ave: 0.0 };
    for (d, g) in pairs {
        e.ate += center_distance(d, g);
        e.ase += 1.0 - aligned_iou(d.size, g.size);
        e.aoe += yaw_gap(d.yaw, g.yaw);
        e.ave += (d.velocity[0] - g.velocity[0]).hypot(d.velocity[1] - g.velocity[1]);
    }
    TpErrors { ate: e.ate / n, ase: e.ase / n, aoe: e.aoe / n, ave: e.ave / n }
}

/// `(5·mAP + Σ (1 − min(1, e))) / (5 + #errors)`.
pub fn nds(map: f64, errors: &[f64]) -> f64 {
    let tp: f64 = errors.iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / (5.0 + errors.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    /// AP at each entry of [`DISTANCE_THRESHOLDS`].
    pub ap: [Option<f64>; 4],
    pub errors: TpErrors,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassEval>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub nds: f64,
}

/// One evaluated frame: detections and the ground truth they answer to.
pub struct Frame<'a> {
    pub detections: &'a [Detection],
    pub ground_truth: &'a [ObjectBox],
}

/// Pools all frames per class, ranks detections by score and evaluates.
pub fn evaluate(frames: &[Frame<'_>], n_classes: usize) -> EvalResult {
    let mut per_class = Vec::with_capacity(n_classes);
    for class_id in 0..n_classes {
        let per_frame: Vec<(Vec<Detection>, Vec<ObjectBox>)> = frames
            .iter()
            .map(|f| {
                let mut d: Vec<Detection> = f.detections.iter().filter(|d| d.class_id == class_id).cloned().collect();
                d.sort_by(|a, b| b.score.total_cmp(&a.score));
                let g = f.ground_truth.iter().filter(|g| g.class_id == class_id).cloned().collect();
                (d, g)
            })
            .collect();
        let num_gt = per_frame.iter().map(|f| f.1.len()).sum();
        let num_det = per_frame.iter().map(|f| f.0.len()).sum();
        let mut ap = [None; 4];
        for (slot, &th) in ap.iter_mut().zip(&DISTANCE_THRESHOLDS) {
            let mut ranked: Vec<(f64, bool)> = Vec::with_capacity(num_det);
            for (d, g) in &per_frame {
                let m = match_detections(d, g, th);
                ranked.extend(d.iter().zip(m.is_tp).map(|(d, tp)| (d.score, tp)));
            }
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            let labels: Vec<bool> = ranked.into_iter().map(|r| r.1).collect();
            *slot = average_precision(&labels, num_gt);
        }
        let mut matched = Vec::new();
        for (d, g) in &per_frame {
            let m = match_detections(d, g, TP_THRESHOLD);
            matched.extend(m.pairs.iter().map(|&(i, j)| (d[i].clone(), g[j].clone())));
        }
        let refs: Vec<(&Detection, &ObjectBox)> = matched.iter().map(|(d, g)| (d, g)).collect();
        per_class.push(ClassEval { class_id, ap, errors: tp_errors(&refs), num_gt, num_det });
    }
    let aps: Vec<f64> = per_class.iter().flat_map(|c| c.ap.iter().flatten().copied()).collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    let scored: Vec<&ClassEval> = per_class.iter().filter(|c| c.ap.iter().any(Option::is_some)).collect();
    let mean_err = |f: fn(&TpErrors) -> f64| {
        if scored.is_empty() {
            1.0
        } else {
            scored.iter().map(|c| f(&c.errors)).sum::<f64>() / scored.len() as f64
        }
    };
    let (mate, mase, maoe, mave) = (mean_err(|e| e.ate), mean_err(|e| e.ase), mean_err(|e| e.aoe), mean_err(|e| e.ave));
    EvalResult { nds: nds(map, &[mate, mase, maoe, mave]), per_class, map, mate, mase, maoe, mave }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::oracle::{average_precision_oracle, match_detections_oracle};

    fn gt(x: f64, y: f64, class_id: usize) -> ObjectBox {
        ObjectBox { center: [x, y, 0.3], size: [1.0, 0.6, 0.5], yaw: 0.2, velocity: [0.5, 0.0], class_id }
    }

    fn det_at(x: f64, y: f64, class_id: usize, score: f64) -> Detection {
        Detection::from_box(&gt(x, y, class_id), score)
    }

    #[test]
    fn matching_examples() {
        let g = [gt(1.0, 1.0, 0)];
        for th in DISTANCE_THRESHOLDS {
            assert_eq!(match_detections(&[det_at(1.0, 1.0, 0, 0.9)], &g, th).is_tp, vec![true]);
        }
        let off = [det_at(2.5, 1.0, 0, 0.9)];
        let labels: Vec<bool> = DISTANCE_THRESHOLDS.iter().map(|&th| match_detections(&off, &g, th).is_tp[0]).collect();
        assert_eq!(labels, vec![false, false, true, true]);
        let two = [det_at(1.1, 1.0, 0, 0.9), det_at(1.0, 1.0, 0, 0.5)];
        assert_eq!(match_detections(&two, &g, 2.0).is_tp, vec![true, false]);
        assert_eq!(match_detections(&[det_at(1.0, 1.0, 1, 0.9)], &g, 2.0).is_tp, vec![false]);
    }

    #[test]
    fn matching_agrees_with_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..100 {
            let gts: Vec<ObjectBox> = (0..rng.gen_range(0..6))
                .map(|_| gt(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(0..2)))
                .collect();
            let mut dets: Vec<Detection> = (0..rng.gen_range(0..8))
                .map(|_| det_at(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(0..2), rng.gen_range(0.0..1.0)))
                .collect();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            let th = DISTANCE_THRESHOLDS[case % 4];
            assert_eq!(match_detections(&dets, &gts, th), match_detections_oracle(&dets, &gts, th), "case {case}");
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, true], 3), Some(1.0));
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        let ap = average_precision(&[true, false], 1).unwrap();
        let hand = (89.0 * 0.9 + 0.4) / 90.0 / 0.9;
        assert!((ap - hand).abs() < 1e-12, "{ap} vs {hand}");
        assert!((ap - average_precision_oracle(&[true, false], 1)).abs() < 1e-12);
    }

    #[test]
    fn ap_agrees_with_integration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let labels: Vec<bool> = (0..rng.gen_range(1..30)).map(|_| rng.gen_bool(0.6)).collect();
            let tp = labels.iter().filter(|&&l| l).count();
            let n_gt = tp + rng.gen_range(0..5);
            if n_gt == 0 {
                continue;
            }
            let ap = average_precision(&labels, n_gt).unwrap();
            assert!((ap - average_precision_oracle(&labels, n_gt)).abs() < 1e-12);
        }
    }

    #[test]
    fn tp_error_examples() {
        let g = gt(0.0, 0.0, 0);
        let d = Detection::from_box(&g, 1.0);
        assert_eq!(tp_errors(&[(&d, &g)]).as_array(), [0.0; 4]);
        let mut turned = d.clone();
        turned.yaw += PI / 2.0;
        assert!((tp_errors(&[(&turned, &g)]).aoe - PI / 2.0).abs() < 1e-12);
        let mut stretched = d.clone();
        stretched.size[1] *= 2.0;
        assert!((tp_errors(&[(&stretched, &g)]).ase - 0.5).abs() < 1e-12);
        assert_eq!(tp_errors(&[]), TpErrors::WORST);
        assert!((yaw_gap(3.0, -3.0) - (2.0 * PI - 6.0)).abs() < 1e-12);
    }

    #[test]
    fn nds_examples() {
        assert_eq!(nds(1.0, &[0.0; 4]), 1.0);
        assert_eq!(nds(0.0, &[1.0, 2.0, 1.5, 3.0]), 0.0);
        assert!((nds(0.5, &[0.5; 4]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_frame_scores_one() {
        let gts = vec![gt(1.0, 2.0, 0), gt(-3.0, 1.0, 1), gt(4.0, -4.0, 1)];
        let dets: Vec<Detection> = gts.iter().map(|g| Detection::from_box(g, 0.8)).collect();
        let r = evaluate(&[Frame { detections: &dets, ground_truth: &gts }], 2);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.nds, 1.0);
        let empty = evaluate(&[Frame { detections: &[], ground_truth: &gts }], 2);
        assert_eq!((empty.map, empty.nds), (0.0, 0.0));
    }

    fn labels_strategy() -> impl Strategy<Value = (Vec<bool>, usize)> {
        (prop::collection::vec(any::<bool>(), 0..25), 0usize..5).prop_map(|(l, extra)| {
            let tp = l.iter().filter(|&&x| x).count();
            (l, tp + extra + 1)
        })
    }

    proptest! {
        #[test]
        fn adding_a_true_positive_never_lowers_ap((labels, n_gt) in labels_strategy(), at in 0usize..25) {
            let before = average_precision(&labels, n_gt).unwrap();
            let mut more = labels.clone();
            more.insert(at.min(labels.len()), true);
            prop_assert!(average_precision(&more, n_gt).unwrap() >= before - 1e-12);
        }

        #[test]
        fn trailing_false_positive_never_raises_ap((labels, n_gt) in labels_strategy()) {
            let before = average_precision(&labels, n_gt).unwrap();
            let mut more = labels.clone();
            more.push(false);
            prop_assert!(average_precision(&more, n_gt).unwrap() <= before + 1e-12);
        }

        #[test]
        fn wider_threshold_never_lowers_ap(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts: Vec<ObjectBox> = (0..rng.gen_range(1..5))
                .map(|_| gt(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), 0))
                .collect();
            let dets: Vec<Detection> = (0..rng.gen_range(0..6))
                .map(|_| det_at(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), 0, rng.gen_range(0.0..1.0)))
                .collect();
            let r = evaluate(&[Frame { detections: &dets, ground_truth: &gts }], 1);
            let ap = r.per_class[0].ap;
            prop_assert!(ap[3].unwrap() >= ap[0].unwrap() - 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.nds) && (0.0..=1.0).contains(&r.map));
        }
    }
}
