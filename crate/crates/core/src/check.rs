//! Property suites comparing the pipeline against its brute-force oracles.
//!
//! Each suite runs a fixed, seeded set of cases and reports how many passed,
//! the first counterexample and its wall time against a budget.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::formats::{bev_to_pgm, decode_pgm};
use crate::geometry::{random_camera, BevConfig, DepthBins};
use crate::hungarian::{hungarian_match, CostMatrix};
use crate::losses::LossWeights;
use crate::metrics::{evaluate, match_detections, Frame, DISTANCE_THRESHOLDS};
use crate::model::{forward, init_params, ModelConfig, SceneInput};
use crate::nn::{init_dense, Extent, ParamSet};
use crate::numerics::{finite_diff_check, finite_diff_probe, ops, Eager, Graph, Tape, Tensor, DEFAULT_EPS};
use crate::oracle::{assignment_oracle, point_stream_oracle, ray_stream_oracle, select_candidates_oracle};
use crate::predictor::{select_candidates, task_specific_fuse, Detection};
use crate::scene::{default_rig, generate_scene, lidar_scan, LidarConfig, ObjectBox, PointCloud};
use crate::training::{depth_bce, depth_pretrain, objective, scene_batch, train, TrainConfig};
use crate::view::{bin_partition, depth_loss, frustum_cells, plan_point_stream, point_stream, ray_stream, DepthGroundTruth};

/// Deliberate faults that the suites must catch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sabotage {
    /// The ray scatter skips the farthest depth bin of every pixel.
    RayScatter,
}

impl FromStr for Sabotage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ray-scatter" => Ok(Sabotage::RayScatter),
            other => Err(Error::Domain(format!("unknown sabotage `{other}` (known: ray-scatter)"))),
        }
    }
}

/// Outcome of one suite.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub invariant: &'static str,
    pub cases: usize,
    pub passed: usize,
    /// First failing case, if any.
    pub failure: Option<String>,
    #[serde(skip)]
    pub seconds: f64,
    pub budget_seconds: Option<f64>,
}

impl SuiteReport {
    pub fn over_budget(&self) -> bool {
        self.budget_seconds.is_some_and(|b| self.seconds > b)
    }

    pub fn ok(&self) -> bool {
        self.failure.is_none() && self.passed == self.cases && !self.over_budget()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.ok() { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<22} {:>5}/{:<5} {:>7.2}s", self.name, self.passed, self.cases, self.seconds)?;
        if let Some(b) = self.budget_seconds {
            write!(f, " (budget {b}s)")?;
        }
        if !self.ok() {
            write!(f, "\n     invariant: {}", self.invariant)?;
        }
        if let Some(msg) = &self.failure {
            write!(f, "\n     first failure: {msg}")?;
        }
        if self.over_budget() {
            write!(f, "\n     exceeded its time budget")?;
        }
        Ok(())
    }
}

/// Counts passing cases and keeps the first failure message.
#[derive(Default)]
struct Tally {
    cases: usize,
    passed: usize,
    failure: Option<String>,
}

impl Tally {
    fn case(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if ok {
            self.passed += 1;
        } else if self.failure.is_none() {
            self.failure = Some(describe());
        }
    }

    /// Records an errored case as a failure.
    fn attempt(&mut self, label: &str, f: impl FnOnce() -> Result<(bool, String)>) {
        match f() {
            Ok((ok, msg)) => self.case(ok, || format!("{label}: {msg}")),
            Err(e) => self.case(false, || format!("{label}: {e}")),
        }
    }
}

struct Suite {
    name: &'static str,
    invariant: &'static str,
    budget_seconds: Option<f64>,
    run: fn(Option<Sabotage>, &mut Tally),
}

const SUITES: &[Suite] = &[
    Suite {
        name: "geometry-roundtrip",
        invariant: "unprojecting a projected in-view point recovers it within 1e-9 m",
        budget_seconds: Some(1.0),
        run: geometry_roundtrip,
    },
    Suite {
        name: "ray-stream-oracle",
        invariant: "ray scatter equals the exhaustive (pixel, bin) scatter within 1e-9",
        budget_seconds: Some(5.0),
        run: ray_stream_equivalence,
    },
    Suite {
        name: "one-hot-concentration",
        invariant: "a one-hot depth distribution puts each pixel into at most one BEV cell",
        budget_seconds: None,
        run: one_hot_concentration,
    },
    Suite {
        name: "point-partition",
        invariant: "every in-grid LiDAR point lands in exactly one BEV cell",
        budget_seconds: None,
        run: point_partition,
    },
    Suite {
        name: "point-stream-oracle",
        invariant: "point gather equals the per-point loop within 1e-12",
        budget_seconds: None,
        run: point_stream_equivalence,
    },
    Suite {
        name: "candidate-selection",
        invariant: "candidate indices equal the brute-force local-maximum scan",
        budget_seconds: None,
        run: candidate_selection,
    },
    Suite {
        name: "hungarian",
        invariant: "assignment cost equals the minimum over all injective assignments",
        budget_seconds: Some(10.0),
        run: hungarian_optimality,
    },
    Suite {
        name: "gradients",
        invariant: "tape gradients match central differences (1e-4; pipeline probe 1e-3)",
        budget_seconds: None,
        run: gradients,
    },
    Suite {
        name: "fuser-identities",
        invariant: "unit modulation concatenates the inputs and zero modulation collapses to zero, bit-exactly",
        budget_seconds: None,
        run: fuser_identities,
    },
    Suite {
        name: "training",
        invariant: "depth BCE falls below 20% and joint loss by at least half, reproducibly",
        budget_seconds: None,
        run: training_progress,
    },
    Suite {
        name: "metrics-sanity",
        invariant: "perfect detections score mAP = NDS = 1 and a 4.1 m miss is a false positive at every threshold",
        budget_seconds: None,
        run: metrics_sanity,
    },
    Suite {
        name: "bev-sparsity",
        invariant: "the point BEV occupies no more cells than the ray BEV and dumps as a valid PGM",
        budget_seconds: None,
        run: bev_sparsity,
    },
];

/// Suite names in run order.
pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|s| s.name).collect()
}

/// Runs the suites whose name contains `filter` (all when `None`).
pub fn run_suites(filter: Option<&str>, sabotage: Option<Sabotage>) -> Vec<SuiteReport> {
    SUITES
        .iter()
        .filter(|s| filter.is_none_or(|f| s.name.contains(f)))
        .map(|s| {
            let start = Instant::now();
            let mut tally = Tally::default();
            (s.run)(sabotage, &mut tally);
            SuiteReport {
                name: s.name,
                invariant: s.invariant,
                cases: tally.cases,
                passed: tally.passed,
                failure: tally.failure,
                seconds: start.elapsed().as_secs_f64(),
                budget_seconds: s.budget_seconds,
            }
        })
        .collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

fn rand_probs(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor {
    ops::softmax(&rand_tensor(rng, &[rows, d]).map(|v| 3.0 * v), 1).expect("rank 2")
}

/// Frustum cells, with the farthest bin dropped under sabotage.
fn scatter_cells(cells: Vec<Option<usize>>, bins: usize, sabotage: Option<Sabotage>) -> Vec<Option<usize>> {
    match sabotage {
        Some(Sabotage::RayScatter) => cells
            .into_iter()
            .enumerate()
            .map(|(i, c)| if i % bins == bins - 1 { None } else { c })
            .collect(),
        None => cells,
    }
}

fn geometry_roundtrip(_: Option<Sabotage>, t: &mut Tally) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e0);
    for c in 0..20 {
        let cam = random_camera(&mut rng);
        let mut worst = 0.0f64;
        let mut failed = None;
        for _ in 0..1000 {
            let u = rng.gen_range(0.0..cam.width as f64);
            let v = rng.gen_range(0.0..cam.height as f64);
            let depth = rng.gen_range(0.2..40.0);
            let p = cam.unproject(u, v, depth).expect("positive depth");
            match cam.project(&p) {
                Some(q) => {
                    let back = cam.unproject(q.u, q.v, q.depth).expect("positive depth");
                    let err = (0..3).map(|i| (back[i] - p[i]).abs()).fold(0.0, f64::max);
                    worst = worst.max(err);
                }
                None => failed = Some(format!("point {p:?} at pixel ({u}, {v}) projected out of view")),
            }
        }
        let ok = failed.is_none() && worst < 1e-9;
        t.case(ok, || failed.unwrap_or_else(|| format!("camera {c}: roundtrip error {worst:e} m")));
    }
}

fn ray_setup() -> (BevConfig, DepthBins, Extent) {
    (BevConfig { n: 16, ..BevConfig::default() }, DepthBins::new(0.5, 8.5, 4).expect("valid bins"), Extent::new(8, 8))
}

fn ray_stream_equivalence(sabotage: Option<Sabotage>, t: &mut Tally) {
    let (bev, bins, e) = ray_setup();
    for seed in 0..50 {
        t.attempt(&format!("seed {seed}"), || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cam = random_camera(&mut rng);
            cam.width = 16;
            cam.height = 16;
            let ctx = rand_tensor(&mut rng, &[e.cells(), 3]);
            let probs = rand_probs(&mut rng, e.cells(), bins.count);
            let cells = scatter_cells(frustum_cells(&cam, &bins, &bev, e, 2), bins.count, sabotage);
            let got = ray_stream(&mut Eager, &ctx, &probs, &cells, &bev)?;
            let want = ray_stream_oracle(&ctx, &probs, &cam, &bins, &bev, e, 2);
            let dev = got.max_abs_diff(&want);
            Ok((dev < 1e-9, format!("max deviation {dev:e}")))
        });
    }
}

fn one_hot_concentration(sabotage: Option<Sabotage>, t: &mut Tally) {
    let (bev, bins, e) = ray_setup();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut cam = random_camera(&mut rng);
        cam.width = 16;
        cam.height = 16;
        let exact = frustum_cells(&cam, &bins, &bev, e, 2);
        let cells = scatter_cells(exact.clone(), bins.count, sabotage);
        let ctx = Tensor::full(&[e.cells(), 2], 1.0);
        for pix in 0..e.cells() {
            let bin = rng.gen_range(0..bins.count);
            t.attempt(&format!("seed {seed} pixel {pix} bin {bin}"), || {
                let mut probs = Tensor::zeros(&[e.cells(), bins.count]);
                probs.set(&[pix, bin], 1.0);
                let out = ray_stream(&mut Eager, &ctx, &probs, &cells, &bev)?;
                let touched: Vec<usize> = (0..bev.cells()).filter(|&c| out.row(c).iter().any(|&v| v != 0.0)).collect();
                let expected: Vec<usize> = exact[pix * bins.count + bin].into_iter().collect();
                Ok((touched == expected, format!("touched {touched:?}, expected {expected:?}")))
            });
        }
    }
}

fn default_cloud(seed: u64, bev: &BevConfig) -> Result<PointCloud> {
    let lidar = LidarConfig::default();
    let scene = generate_scene(6, bev, 10, seed)?;
    lidar_scan(&scene, &lidar.origin, 64, &lidar.elevations)
}

fn point_partition(_: Option<Sabotage>, t: &mut Tally) {
    let bev = BevConfig::default();
    let cams = default_rig(32, 32);
    for seed in 0..20 {
        t.attempt(&format!("scene {seed}"), || {
            let mut pc = default_cloud(seed, &bev)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Stray points outside the grid must not be binned.
            pc.points.extend((0..20).map(|_| [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), 0.5, 1.0, 0.0]));
            let mut hits = vec![0usize; pc.len()];
            for (cell, members) in bin_partition(&pc, &bev) {
                for i in members {
                    hits[i] += 1;
                    if bev.flat_index(pc.points[i][0], pc.points[i][1]) != Some(cell) {
                        return Ok((false, format!("point {i} binned into the wrong cell {cell}")));
                    }
                }
            }
            for (i, &h) in hits.iter().enumerate() {
                let inside = bev.contains(pc.points[i][0], pc.points[i][1]);
                if h != usize::from(inside) {
                    return Ok((false, format!("point {i} (inside = {inside}) binned {h} times")));
                }
            }
            // Every camera entry of a point must target that point's cell.
            let plan = plan_point_stream(&pc, &cams, &bev);
            for entries in &plan.per_camera {
                for &(_, cell, _) in entries {
                    if cell >= bev.cells() {
                        return Ok((false, format!("plan writes cell {cell} outside the grid")));
                    }
                }
            }
            let hr: Vec<Tensor> = cams.iter().map(|_| Tensor::full(&[32 * 32, 1], 1.0)).collect();
            let out = point_stream(&mut Eager, &hr, &plan, &bev)?;
            // Unit features average to exactly one in every written cell.
            let bad = (0..bev.cells()).find(|&c| {
                let v = out.get(&[c, 0]);
                v != 0.0 && (v - 1.0).abs() > 1e-12
            });
            Ok((bad.is_none(), format!("cell {bad:?} is not a mean of unit features")))
        });
    }
}

fn point_stream_equivalence(_: Option<Sabotage>, t: &mut Tally) {
    let bev = BevConfig::default();
    let cams = default_rig(32, 32);
    for seed in 0..100 {
        t.attempt(&format!("scene {seed}"), || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pc = default_cloud(seed, &bev)?;
            let hr: Vec<Tensor> = cams.iter().map(|_| rand_tensor(&mut rng, &[32 * 32, 3])).collect();
            let got = point_stream(&mut Eager, &hr, &plan_point_stream(&pc, &cams, &bev), &bev)?;
            let dev = got.max_abs_diff(&point_stream_oracle(&pc, &hr, &cams, &bev));
            Ok((dev < 1e-12, format!("max deviation {dev:e}")))
        });
    }
}

fn candidate_selection(_: Option<Sabotage>, t: &mut Tally) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xca7);
    for case in 0..200 {
        let mut heat = Tensor::new(vec![256, 3], (0..768).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("shape");
        match case % 4 {
            0 => heat = heat.map(|v| (v * 3.0).floor() / 3.0),
            1 if case % 8 == 1 => heat = Tensor::full(&[256, 3], 0.5),
            _ => {}
        }
        let k = 1 + case % 24;
        t.attempt(&format!("heatmap {case} (k = {k})"), || {
            let got = select_candidates(&heat, 16, k)?;
            let want = select_candidates_oracle(&heat, 16, k);
            let cells = |c: &crate::predictor::CandidateSet| c.items.iter().map(|i| (i.gx, i.gy, i.class_id)).collect::<Vec<_>>();
            Ok((got == want, format!("got {:?}, expected {:?}", cells(&got), cells(&want))))
        });
    }
}

fn hungarian_optimality(_: Option<Sabotage>, t: &mut Tally) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4a6);
    for rows in 1..=6 {
        for cols in 1..=6 {
            for i in 0..100 {
                let integer = i % 3 == 0;
                let data = (0..rows * cols)
                    .map(|_| if integer { f64::from(rng.gen_range(0..4u8)) } else { rng.gen_range(-5.0..5.0) })
                    .collect();
                let c = CostMatrix::new(rows, cols, data).expect("shape");
                t.attempt(&format!("{rows}×{cols} matrix {i}"), || {
                    let got = hungarian_match(&c)?;
                    let (best, _) = assignment_oracle(&c);
                    let ok = got.cost == best && got.pairs.len() == rows.min(cols);
                    Ok((ok, format!("cost {} vs optimum {best}", got.cost)))
                });
            }
        }
    }
}

fn gradients(_: Option<Sabotage>, t: &mut Tally) {
    let tol = 1e-4;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(0.05..0.95)).collect()).expect("shape");
        let target = Tensor::new(vec![4, 3], (0..12).map(|_| f64::from(rng.gen_range(0..2u8))).collect()).expect("shape");
        let weight = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(0.1..1.0)).collect()).expect("shape");
        t.attempt(&format!("focal seed {seed}"), || {
            let err = finite_diff_check(|g: &mut Tape, x| g.focal(&x, &target, &weight, 0.25, 2.0), &probs, DEFAULT_EPS)?;
            Ok((err <= tol, format!("relative error {err:e}")))
        });

        let pred = rand_tensor(&mut rng, &[3, 10]);
        // Keep targets away from kinks of |·|.
        let goal = pred.map(|v| v + if v > 0.0 { 0.3 } else { -0.3 });
        let w = Tensor::full(&[3, 10], 0.1);
        t.attempt(&format!("l1 seed {seed}"), || {
            let err = finite_diff_check(|g: &mut Tape, x| g.l1(&x, &goal, &w), &pred, DEFAULT_EPS)?;
            Ok((err <= tol, format!("relative error {err:e}")))
        });

        let logits = rand_tensor(&mut rng, &[6, 4]);
        let mut onehot = Tensor::zeros(&[6, 4]);
        let mut mask = Tensor::zeros(&[6]);
        for r in 0..6 {
            if rng.gen_bool(0.7) {
                onehot.set(&[r, rng.gen_range(0..4)], 1.0);
                mask.data_mut()[r] = 1.0;
            }
        }
        let gt = DepthGroundTruth { onehot, mask };
        t.attempt(&format!("depth bce seed {seed}"), || {
            let err = finite_diff_check(
                |g: &mut Tape, x| {
                    let p = g.softmax(&x, 1)?;
                    depth_loss(g, &p, &gt)
                },
                &logits,
                DEFAULT_EPS,
            )?;
            Ok((err <= tol, format!("relative error {err:e}")))
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for round in 0..5 {
        let (k, cg, cs, out) = (3, 4, 3, 5);
        let fg = rand_tensor(&mut rng, &[k, cg]);
        let fs = rand_tensor(&mut rng, &[k, cs]);
        let ps = fuser_params(&mut rng, cg, cs, out);
        let probe = rand_tensor(&mut rng, &[k, out]);
        for name in ps.names().cloned().collect::<Vec<_>>() {
            t.attempt(&format!("fuser round {round} {name}"), || {
                let err = finite_diff_check(
                    |g: &mut Tape, p| {
                        g.bind(&name, p);
                        let a = g.constant(fg.clone());
                        let b = g.constant(fs.clone());
                        let q = task_specific_fuse(g, &ps, "f", &a, &b)?;
                        let pr = g.constant(probe.clone());
                        let y = g.mul(&q, &pr)?;
                        g.sum(&y)
                    },
                    ps.get(&name).expect("listed"),
                    DEFAULT_EPS,
                )?;
                Ok((err <= tol, format!("relative error {err:e}")))
            });
        }
    }

    let cfg = ModelConfig { k: 6, ..ModelConfig::tiny() };
    let w = LossWeights::default();
    let prepared = init_params(&cfg, 2).and_then(|ps| {
        let scene = generate_scene(3, &cfg.bev, cfg.classes, 5)?;
        Ok((ps, SceneInput::prepare(&scene, &cfg)?))
    });
    let (ps, input) = match prepared {
        Ok(v) => v,
        Err(e) => return t.case(false, || format!("pipeline setup: {e}")),
    };
    for name in ["lidar.compress.weight", "depth.head.1.weight", "tsp.fuse_box.psi.weight", "bev_fuse.0.weight"] {
        t.attempt(&format!("pipeline probe {name}"), || {
            let x = ps.get(name)?;
            let err = finite_diff_probe(
                |g: &mut Tape, v| {
                    g.bind(name, v);
                    let out = forward(g, &ps, &cfg, &input, None)?;
                    objective(g, &out, &input, &cfg, &w).map(|(l, _)| l)
                },
                x,
                &[0, 1, 2, 3],
                1e-6,
            )?;
            Ok((err <= 1e-3, format!("relative error {err:e}")))
        });
    }
}

fn fuser_params(rng: &mut ChaCha8Rng, cg: usize, cs: usize, out: usize) -> ParamSet {
    let mut ps = ParamSet::new();
    init_dense(&mut ps, rng, "f.gamma_s", cs, cg + cs, true);
    init_dense(&mut ps, rng, "f.beta_s", cs, cg + cs, true);
    init_dense(&mut ps, rng, "f.gamma_g", cg, cg + cs, true);
    init_dense(&mut ps, rng, "f.beta_g", cg, cg + cs, true);
    init_dense(&mut ps, rng, "f.psi", out, cg + cs, true);
    for (name, t) in ps.iter_mut() {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    ps
}

fn fuser_identities(_: Option<Sabotage>, t: &mut Tally) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf05);
    for case in 0..20 {
        let (k, cg, cs) = (1 + case % 5, 2 + case % 3, 1 + case % 4);
        let fg = rand_tensor(&mut rng, &[k, cg]).map(|v| 10.0 * v);
        let fs = rand_tensor(&mut rng, &[k, cs]).map(|v| 10.0 * v);
        let mut ps = fuser_params(&mut rng, cg, cs, cg + cs);
        for (name, bias) in [("gamma_s", 1.0), ("gamma_g", 1.0), ("beta_s", 0.0), ("beta_g", 0.0)] {
            ps.get_mut(&format!("f.{name}.weight")).expect("present").data_mut().fill(0.0);
            ps.get_mut(&format!("f.{name}.bias")).expect("present").data_mut().fill(bias);
        }
        let psi = ps.get_mut("f.psi.weight").expect("present");
        psi.data_mut().fill(0.0);
        for i in 0..cg + cs {
            psi.set(&[i, i], 1.0);
        }
        ps.get_mut("f.psi.bias").expect("present").data_mut().fill(0.0);
        t.attempt(&format!("identity case {case}"), || {
            let q = task_specific_fuse(&mut Eager, &ps, "f", &fg, &fs)?;
            Ok((q == ops::concat(&[&fs, &fg], 1)?, "output differs from [f_s, f_g]".into()))
        });

        for name in ["gamma_s", "gamma_g", "beta_s", "beta_g"] {
            ps.get_mut(&format!("f.{name}.bias")).expect("present").data_mut().fill(0.0);
        }
        let psi = ps.get_mut("f.psi.weight").expect("present");
        psi.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        t.attempt(&format!("collapse case {case}"), || {
            let q = task_specific_fuse(&mut Eager, &ps, "f", &fg, &fs)?;
            Ok((q.data().iter().all(|&v| v == 0.0), "output is not identically zero".into()))
        });
    }
}

/// Learning rate of the depth-only pretraining check.
const DEPTH_PRETRAIN_LR: f64 = 0.05;

fn training_progress(_: Option<Sabotage>, t: &mut Tally) {
    let cfg = TrainConfig::default();
    t.attempt("depth pretrain", || {
        let batch = scene_batch(&cfg.model, 1, 6, 0)?;
        let run = || -> Result<(Vec<f64>, f64)> {
            let mut ps = init_params(&cfg.model, 0)?;
            let curve = depth_pretrain(&cfg.model, &mut ps, &batch, 200, DEPTH_PRETRAIN_LR)?;
            Ok((curve, depth_bce(&cfg.model, &ps, &batch)?))
        };
        let (curve, last) = run()?;
        let ratio = last / curve[0];
        let (again, _) = run()?;
        Ok((ratio < 0.2 && again == curve, format!("BCE {:.4} -> {last:.4} (ratio {ratio:.3}), rerun identical: {}", curve[0], again == curve)))
    });
    t.attempt("joint training", || {
        let batch = scene_batch(&cfg.model, 4, 6, 0)?;
        let a = train(&cfg, &batch)?;
        let b = train(&cfg, &batch)?;
        let ratio = a.final_loss() / a.initial_loss();
        let same = a.loss_curve == b.loss_curve && a.params == b.params;
        Ok((ratio <= 0.5 && same, format!("loss {:.4} -> {:.4} (ratio {ratio:.3}), rerun identical: {same}", a.initial_loss(), a.final_loss())))
    });
}

fn metrics_sanity(_: Option<Sabotage>, t: &mut Tally) {
    let bev = BevConfig::default();
    for seed in 0..10 {
        t.attempt(&format!("perfect scene {seed}"), || {
            let frames: Vec<Vec<ObjectBox>> = (0..3).map(|i| generate_scene(6, &bev, 10, seed * 10 + i).map(|s| s.boxes)).collect::<Result<_>>()?;
            let dets: Vec<Vec<Detection>> = frames.iter().map(|g| g.iter().map(|b| Detection::from_box(b, 0.9)).collect()).collect();
            let f: Vec<Frame<'_>> = frames.iter().zip(&dets).map(|(g, d)| Frame { detections: d, ground_truth: g }).collect();
            let r = evaluate(&f, 10);
            Ok((r.map == 1.0 && r.nds == 1.0, format!("mAP {} NDS {}", r.map, r.nds)))
        });
    }
    let gt = ObjectBox { center: [0.0, 0.0, 0.4], size: [1.0, 0.5, 0.8], yaw: 0.0, velocity: [0.0, 0.0], class_id: 0 };
    for (dx, dy) in [(4.1, 0.0), (0.0, -4.1), (2.9, 2.9)] {
        let mut b = gt.clone();
        b.center[0] += dx;
        b.center[1] += dy;
        let det = [Detection::from_box(&b, 0.8)];
        let gts = [gt.clone()];
        for th in DISTANCE_THRESHOLDS {
            let m = match_detections(&det, &gts, th);
            t.case(m.is_tp == [false], || format!("offset ({dx}, {dy}) counted as a hit at {th} m"));
        }
    }
}

fn bev_sparsity(_: Option<Sabotage>, t: &mut Tally) {
    let cfg = ModelConfig::desk();
    let ps = match init_params(&cfg, 0) {
        Ok(ps) => ps,
        Err(e) => return t.case(false, || format!("init: {e}")),
    };
    let nonzero = |m: &Tensor| (0..m.rows()).filter(|&r| m.row(r).iter().any(|&v| v != 0.0)).count();
    for seed in 0..20 {
        t.attempt(&format!("scene {seed}"), || {
            let scene = generate_scene(6, &cfg.bev, cfg.classes, seed)?;
            let input = SceneInput::prepare(&scene, &cfg)?;
            let mut g = Eager;
            let out = forward(&mut g, &ps, &cfg, &input, None)?;
            let point = out.point_bev.as_ref().ok_or_else(|| Error::Contract("default model has no point stream".into()))?;
            let (np, nr) = (nonzero(point), nonzero(&out.ray_bev));
            let mut pgm_ok = true;
            for map in [&out.ray_bev, point, &out.camera_bev] {
                let bytes = bev_to_pgm(map, cfg.bev.n)?;
                let (w, h, samples) = decode_pgm(&bytes, Path::new("bev.pgm"))?;
                pgm_ok &= w == cfg.bev.n && h == cfg.bev.n && samples.len() == w * h;
            }
            Ok((np <= nr && pgm_ok, format!("point BEV {np} cells vs ray BEV {nr}; PGM valid: {pgm_ok}")))
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sabotage_is_caught_and_named() {
        let reports = run_suites(Some("ray-stream-oracle"), Some(Sabotage::RayScatter));
        assert_eq!(reports.len(), 1);
        assert!(!reports[0].ok());
        let text = reports[0].to_string();
        assert!(text.contains("exhaustive (pixel, bin) scatter"), "{text}");
        assert!("ray-scatter".parse::<Sabotage>().is_ok() && "x".parse::<Sabotage>().is_err());
    }

    #[test]
    fn fast_suites_pass() {
        for name in ["geometry-roundtrip", "one-hot", "point-", "candidate", "fuser-identities", "metrics"] {
            for r in run_suites(Some(name), None) {
                assert!(r.ok(), "{r}");
            }
        }
    }
}
