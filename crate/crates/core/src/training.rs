//! Gradient-descent training, depth pretraining and the module ablation.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossInputs, LossWeights};
use crate::metrics::{evaluate, EvalResult, Frame};
use crate::model::{detections, forward, init_params, DualStream, ForwardOutput, ModelConfig, SceneInput};
use crate::nn::ParamSet;
use crate::numerics::{Eager, Graph, Tape, Tensor};
use crate::predictor::Detection;
use crate::scene::generate_scene;
use crate::view::{camera_encode, depth_loss, depth_net};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Depth-only warmup steps before joint training.
    pub depth_warmup: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            learning_rate: 1e-2,
            seed: 0,
            weights: LossWeights::default(),
            clip_norm: Some(5.0),
            depth_warmup: 0,
            model: ModelConfig::tiny(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Domain("steps must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Domain(format!("clip norm must be > 0, got {c}")));
            }
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Depth loss only counts when the ray stream is supervised.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.model.dual_stream.depth_supervision() {
            w.depth = 0.0;
        }
        w
    }
}

/// `p ← p − lr·g` for every parameter with a gradient.
pub fn sgd_step(ps: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let p = ps
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::dim(format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
            *a -= lr * b;
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Training objective for one scene.
pub fn objective<G: Graph>(
    g: &mut G,
    out: &ForwardOutput<G::V>,
    input: &SceneInput,
    cfg: &ModelConfig,
    w: &LossWeights,
) -> Result<(G::V, LossBreakdown)> {
    let depth = if cfg.dual_stream.depth_supervision() {
        out.depth_probs.iter().zip(&input.depth_targets).collect()
    } else {
        Vec::new()
    };
    let inputs = LossInputs {
        heat: &out.heat,
        logits: &out.logits,
        boxes: &out.boxes,
        aux: out.aux.as_ref().map(|(a, b)| (a, b)),
        cands: &out.cands,
        depth,
    };
    total_loss(g, &inputs, &input.ground_truth, &cfg.bev, w)
}

/// Mean loss and summed gradients over a batch, reduced in scene order.
/// Loss, its breakdown and the gradient of every parameter.
type StepResult = (f64, LossBreakdown, BTreeMap<String, Tensor>);

fn batch_gradients(ps: &ParamSet, cfg: &ModelConfig, w: &LossWeights, batch: &[SceneInput]) -> Result<StepResult> {
    let per_scene: Vec<Result<StepResult>> = batch
        .par_iter()
        .map(|input| {
            let mut t = Tape::new();
            let out = forward(&mut t, ps, cfg, input, None)?;
            let (loss, br) = objective(&mut t, &out, input, cfg, w)?;
            let value = t.value(&loss).item()?;
            Ok((value, br, t.backward(loss)?.by_name()))
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut breakdown = LossBreakdown::default();
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in per_scene {
        let (v, br, g) = r?;
        total += v * scale;
        breakdown.heat += br.heat * scale;
        breakdown.cls += br.cls * scale;
        breakdown.bbox += br.bbox * scale;
        breakdown.aux += br.aux * scale;
        breakdown.depth += br.depth * scale;
        breakdown.total += br.total * scale;
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b * scale),
                None => {
                    grads.insert(name, t.map(|v| v * scale));
                }
            }
        }
    }
    Ok((total, breakdown, grads))
}

/// Outcome of one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    /// Batch-mean total loss before each update.
    pub loss_curve: Vec<f64>,
    pub final_breakdown: LossBreakdown,
    /// Depth warmup loss curve, empty without warmup.
    pub depth_curve: Vec<f64>,
    pub eval: Option<EvalResult>,
    #[serde(skip)]
    pub params: ParamSet,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_curve.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_curve.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains from freshly initialized parameters.
pub fn train(cfg: &TrainConfig, batch: &[SceneInput]) -> Result<RunReport> {
    let params = init_params(&cfg.model, cfg.seed)?;
    train_from(cfg, batch, params)
}

/// Trains starting from `params`.
pub fn train_from(cfg: &TrainConfig, batch: &[SceneInput], mut params: ParamSet) -> Result<RunReport> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Domain("training batch is empty".into()));
    }
    let start = Instant::now();
    let depth_curve = if cfg.depth_warmup > 0 && cfg.model.dual_stream.depth_supervision() {
        depth_pretrain(&cfg.model, &mut params, batch, cfg.depth_warmup, cfg.learning_rate)?
    } else {
        Vec::new()
    };
    let w = cfg.effective_weights();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut final_breakdown = LossBreakdown::default();
    for step in 0..cfg.steps {
        let (loss, br, mut grads) = batch_gradients(&params, &cfg.model, &w, batch)
            .map_err(|e| Error::Diverged { step, message: e.to_string() })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, message: format!("loss is {loss}") });
        }
        if let Some(c) = cfg.clip_norm {
            clip_gradients(&mut grads, c);
        }
        sgd_step(&mut params, &grads, cfg.learning_rate)?;
        loss_curve.push(loss);
        final_breakdown = br;
    }
    Ok(RunReport {
        config: cfg.clone(),
        loss_curve,
        final_breakdown,
        depth_curve,
        eval: None,
        params,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean depth loss of the camera branch over `batch` on `g`.
fn depth_objective<G: Graph>(g: &mut G, ps: &ParamSet, cfg: &ModelConfig, batch: &[SceneInput]) -> Result<G::V> {
    let mut sum: Option<G::V> = None;
    let mut count = 0;
    for input in batch {
        for (i, cam) in input.cameras.iter().enumerate() {
            let img = g.constant(input.images[i].clone());
            let (lr, fe) = camera_encode(g, ps, &img, cfg.image_extent(), cfg.stride)?;
            let (_, probs) = depth_net(g, ps, &lr, fe, cam, cfg.stride)?;
            let l = depth_loss(g, &probs, &input.depth_targets[i])?;
            sum = Some(match sum {
                Some(s) => g.add(&s, &l)?,
                None => l,
            });
            count += 1;
        }
    }
    let sum = sum.ok_or_else(|| Error::Domain("no cameras to pretrain".into()))?;
    g.scale(&sum, 1.0 / count as f64)
}

/// Mean per-pixel depth BCE of the current parameters.
pub fn depth_bce(cfg: &ModelConfig, ps: &ParamSet, batch: &[SceneInput]) -> Result<f64> {
    depth_objective(&mut Eager, ps, cfg, batch)?.item()
}

/// Trains the camera encoder and depth network alone against the LiDAR
/// depth targets. Returns the loss before each step.
pub fn depth_pretrain(
    cfg: &ModelConfig,
    ps: &mut ParamSet,
    batch: &[SceneInput],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut t = Tape::new();
        let loss = depth_objective(&mut t, ps, cfg, batch)?;
        let v = t.value(&loss).item()?;
        if !v.is_finite() {
            return Err(Error::Diverged { step, message: format!("depth loss is {v}") });
        }
        curve.push(v);
        let grads = t.backward(loss)?.by_name();
        sgd_step(ps, &grads, lr)?;
    }
    Ok(curve)
}

/// Detections for every scene.
pub fn predict(cfg: &ModelConfig, ps: &ParamSet, inputs: &[SceneInput]) -> Result<Vec<Vec<Detection>>> {
    inputs
        .par_iter()
        .map(|input| {
            let mut g = Eager;
            let out = forward(&mut g, ps, cfg, input, None)?;
            detections(&g, &out, cfg)
        })
        .collect()
}

pub fn evaluate_model(cfg: &ModelConfig, ps: &ParamSet, inputs: &[SceneInput]) -> Result<EvalResult> {
    let dets = predict(cfg, ps, inputs)?;
    let frames: Vec<Frame<'_>> = dets
        .iter()
        .zip(inputs)
        .map(|(d, i)| Frame { detections: d, ground_truth: &i.ground_truth })
        .collect();
    Ok(evaluate(&frames, cfg.classes))
}

/// Scene batch for training or evaluation, seeded per scene.
pub fn scene_batch(cfg: &ModelConfig, count: usize, boxes: usize, seed: u64) -> Result<Vec<SceneInput>> {
    (0..count)
        .map(|i| {
            let scene = generate_scene(boxes, &cfg.bev, cfg.classes, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
            SceneInput::prepare(&scene, cfg)
        })
        .collect()
}

/// Offset separating held-out scene seeds from training scene seeds.
pub const HELD_OUT_SEED_OFFSET: u64 = 1 << 32;

/// Training and held-out batches for `seed`, drawn from disjoint seed
/// streams.
pub fn split_batches(
    cfg: &ModelConfig,
    train_count: usize,
    held_out_count: usize,
    boxes: usize,
    seed: u64,
) -> Result<(Vec<SceneInput>, Vec<SceneInput>)> {
    let train = scene_batch(cfg, train_count, boxes, seed)?;
    let held = scene_batch(cfg, held_out_count, boxes, seed.wrapping_add(HELD_OUT_SEED_OFFSET))?;
    Ok((train, held))
}

/// One row of the ablation table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub dual_stream: DualStream,
    pub tsp: bool,
    pub report: RunReport,
}

/// The six module configurations compared by [`ablate`].
pub fn ablation_grid() -> Vec<(&'static str, DualStream, bool)> {
    vec![
        ("baseline", DualStream::Off, false),
        ("+dst-ray", DualStream::Ray, false),
        ("+dst-point", DualStream::Point, false),
        ("+dst-both", DualStream::Both, false),
        ("+tsp", DualStream::Off, true),
        ("+dst-both+tsp", DualStream::Both, true),
    ]
}

/// Trains every grid configuration on the same batch and seed and
/// evaluates on `held_out`.
pub fn ablate(base: &TrainConfig, batch: &[SceneInput], held_out: &[SceneInput]) -> Result<Vec<AblationRow>> {
    ablation_grid()
        .into_iter()
        .map(|(name, ds, tsp)| {
            let cfg = TrainConfig { model: ModelConfig { dual_stream: ds, tsp, ..base.model.clone() }, ..base.clone() };
            let mut report = train(&cfg, batch)?;
            if !held_out.is_empty() {
                report.eval = Some(evaluate_model(&cfg.model, &report.params, held_out)?);
            }
            Ok(AblationRow { name: name.to_string(), dual_stream: ds, tsp, report })
        })
        .collect()
}

/// Mean held-out mAP per grid row, averaged over runs.
pub fn mean_map(runs: &[Vec<AblationRow>]) -> Vec<(String, f64)> {
    let Some(first) = runs.first() else { return Vec::new() };
    first
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let sum: f64 = runs.iter().map(|r| r[i].report.eval.as_ref().map_or(0.0, |e| e.map)).sum();
            (row.name.clone(), sum / runs.len() as f64)
        })
        .collect()
}

/// Breaches of `full ≥ every single-module row ≥ baseline` in grid order,
/// where the first row is the baseline and the last the full model.
pub fn ordering_violations(means: &[(String, f64)]) -> Vec<String> {
    let (Some((base, b)), Some((full, f))) = (means.first(), means.last()) else { return Vec::new() };
    let mut out = Vec::new();
    for (name, m) in &means[1..means.len().saturating_sub(1)] {
        if m > f {
            out.push(format!("{name} ({m:.4}) > {full} ({f:.4})"));
        }
        if m < b {
            out.push(format!("{name} ({m:.4}) < {base} ({b:.4})"));
        }
    }
    out
}
