use std::path::Path;
use std::time::Instant;

use bevkit_core::check::{run_suites, SuiteReport};
use bevkit_core::config::Config;
use bevkit_core::formats::{
    bev_to_pgm, encode_detections, encode_rig, encode_scene, encode_eval_csv, encode_eval_json, encode_params, encode_points, encode_tensor,
    read_detections, read_params, read_points, read_rig, read_scene, read_tensor,
};
use bevkit_core::metrics::{evaluate, Frame};
use bevkit_core::model::{detections, forward, init_params, oracle_heatmap, ForwardOutput, SceneInput};
use bevkit_core::nn::ParamSet;
use bevkit_core::predictor::Detection;
use bevkit_core::scene::generate_scene;
use bevkit_core::training::{
    ablate, evaluate_model, mean_map, ordering_violations, split_batches, train, AblationRow, TrainConfig,
};
use bevkit_core::{Eager, Result, Tensor};
use serde::Serialize;

use crate::manifest::Recorder;
use crate::{CheckArgs, Cli, Command, EvalArgs, Failure, RunArgs, SceneArgs};

pub const SCENE_FILE: &str = "scene.toml";
pub const CLOUD_FILE: &str = "cloud.bkp";
pub const RIG_FILE: &str = "rig.toml";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

fn image_file(i: usize) -> String {
    format!("cam{i}.bkt")
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: Config,
}

impl Ctx<'_> {
    fn recorder(&self, name: &str) -> Recorder {
        Recorder::new(name, self.cli.config.as_deref(), self.cfg.seed, &self.cli.out)
    }
}

pub fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Ctx { cli, cfg };
    match &cli.command {
        Command::Gen => gen(&ctx),
        Command::Run(a) => run(&ctx, a),
        Command::Train => train_cmd(&ctx),
        Command::Ablate => ablate_cmd(&ctx),
        Command::Eval(a) => eval(&ctx, a),
        Command::Check(a) => check(&ctx, a),
        Command::DumpBev(a) => dump_bev(&ctx, a),
    }
}

fn gen(ctx: &Ctx<'_>) -> Result<(), Failure> {
    let model = &ctx.cfg.model;
    let scene = generate_scene(ctx.cfg.scene.boxes, &model.bev, model.classes, ctx.cfg.seed)?;
    let input = SceneInput::prepare(&scene, model)?;
    let mut rec = ctx.recorder("gen");
    rec.write(SCENE_FILE, &encode_scene(&scene)?)?;
    rec.write(CLOUD_FILE, &encode_points(&input.cloud))?;
    rec.write(RIG_FILE, &encode_rig(&input.cameras)?)?;
    for (i, img) in input.images.iter().enumerate() {
        rec.write(&image_file(i), &encode_tensor(img))?;
    }
    let truth: Vec<Detection> = scene.boxes.iter().map(|b| Detection::from_box(b, 1.0)).collect();
    rec.write(GROUND_TRUTH_FILE, &encode_detections(&truth)?)?;
    eprintln!(
        "scene: {} boxes, {} LiDAR points, {} cameras -> {}",
        scene.boxes.len(),
        input.cloud.len(),
        input.cameras.len(),
        rec.out_dir().display()
    );
    rec.finish()?;
    Ok(())
}

/// Reads a `gen` directory back into a pipeline input.
fn load_scene(dir: &Path, ctx: &Ctx<'_>) -> Result<SceneInput> {
    let scene = read_scene(&dir.join(SCENE_FILE))?;
    let cloud = read_points(&dir.join(CLOUD_FILE))?;
    let cameras = read_rig(&dir.join(RIG_FILE))?;
    let images = (0..cameras.len())
        .map(|i| read_tensor(&dir.join(image_file(i))))
        .collect::<Result<Vec<Tensor>>>()?;
    SceneInput::from_parts(cloud, cameras, images, scene.boxes, &ctx.cfg.model).map_err(|e| e.in_module("scene"))
}

fn load_params(args: &SceneArgs, ctx: &Ctx<'_>) -> Result<ParamSet> {
    match &args.params {
        Some(p) => read_params(p),
        None => init_params(&ctx.cfg.model, ctx.cfg.seed),
    }
}

fn write_bev_maps(rec: &mut Recorder, out: &ForwardOutput<Tensor>, n: usize, all: bool) -> Result<()> {
    rec.write("ray_bev.pgm", &bev_to_pgm(&out.ray_bev, n)?)?;
    if let Some(p) = &out.point_bev {
        rec.write("point_bev.pgm", &bev_to_pgm(p, n)?)?;
    }
    rec.write("camera_bev.pgm", &bev_to_pgm(&out.camera_bev, n)?)?;
    if all {
        rec.write("lidar_bev.pgm", &bev_to_pgm(&out.lidar_bev, n)?)?;
        rec.write("fused_bev.pgm", &bev_to_pgm(&out.fused_bev, n)?)?;
    }
    Ok(())
}

fn run(ctx: &Ctx<'_>, args: &RunArgs) -> Result<(), Failure> {
    let input = load_scene(&args.scene.scene, ctx)?;
    let ps = load_params(&args.scene, ctx)?;
    let model = &ctx.cfg.model;
    let heat = if args.oracle_heatmap { Some(oracle_heatmap(&input.ground_truth, &model.bev, model.classes)?) } else { None };
    let mut g = Eager;
    let out = forward(&mut g, &ps, model, &input, heat.as_ref())?;
    let dets: Vec<Detection> = detections(&g, &out, model)?
        .into_iter()
        .zip(&out.cands.items)
        .filter(|(_, c)| c.score > args.min_heat)
        .map(|(d, _)| d)
        .collect();
    let mut rec = ctx.recorder("run");
    rec.write("detections.csv", &encode_detections(&dets)?)?;
    write_bev_maps(&mut rec, &out, model.bev.n, false)?;
    eprintln!("{} detections -> {}", dets.len(), rec.out_dir().display());
    rec.finish()?;
    Ok(())
}

fn dump_bev(ctx: &Ctx<'_>, args: &SceneArgs) -> Result<(), Failure> {
    let input = load_scene(&args.scene, ctx)?;
    let ps = load_params(args, ctx)?;
    let out = forward(&mut Eager, &ps, &ctx.cfg.model, &input, None)?;
    let mut rec = ctx.recorder("dump-bev");
    write_bev_maps(&mut rec, &out, ctx.cfg.model.bev.n, true)?;
    rec.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    train: &'a TrainConfig,
    initial_loss: f64,
    final_loss: f64,
    final_breakdown: bevkit_core::losses::LossBreakdown,
    depth_curve: &'a [f64],
}

fn batches(ctx: &Ctx<'_>, seed: u64) -> Result<(Vec<SceneInput>, Vec<SceneInput>)> {
    let (model, t) = (&ctx.cfg.model, &ctx.cfg.train);
    split_batches(model, t.scenes, t.held_out, ctx.cfg.scene.boxes, seed)
}

fn train_cmd(ctx: &Ctx<'_>) -> Result<(), Failure> {
    let tc = ctx.cfg.train_config();
    let (batch, held) = batches(ctx, ctx.cfg.seed)?;
    let start = Instant::now();
    let report = train(&tc, &batch)?;
    eprintln!(
        "trained {} steps in {:.1}s: loss {:.4} -> {:.4}",
        tc.steps,
        start.elapsed().as_secs_f64(),
        report.initial_loss(),
        report.final_loss()
    );
    let mut rec = ctx.recorder("train");
    rec.write("params.bkm", &encode_params(&report.params))?;
    let curve: String = std::iter::once("step,loss\n".to_string())
        .chain(report.loss_curve.iter().enumerate().map(|(i, l)| format!("{i},{l:.17e}\n")))
        .collect();
    rec.write("loss_curve.csv", curve.as_bytes())?;
    let summary = TrainSummary {
        train: &tc,
        initial_loss: report.initial_loss(),
        final_loss: report.final_loss(),
        final_breakdown: report.final_breakdown,
        depth_curve: &report.depth_curve,
    };
    rec.write("train_report.json", &json_bytes(&summary))?;
    if !held.is_empty() {
        let eval = evaluate_model(&tc.model, &report.params, &held)?;
        eprintln!("held-out: mAP {:.4} NDS {:.4}", eval.map, eval.nds);
        rec.write("eval.json", &encode_eval_json(&eval))?;
        rec.write("eval.csv", &encode_eval_csv(&eval)?)?;
    }
    rec.finish()?;
    Ok(())
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable");
    out.push(b'\n');
    out
}

#[derive(Serialize)]
struct AblationSeed<'a> {
    seed: u64,
    rows: &'a [AblationRow],
}

fn ablate_cmd(ctx: &Ctx<'_>) -> Result<(), Failure> {
    let seeds = match ctx.cli.seed {
        Some(s) => vec![s],
        None => ctx.cfg.ablate.seeds.clone(),
    };
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let tc = TrainConfig { seed, ..ctx.cfg.train_config() };
        let (batch, held) = batches(ctx, seed)?;
        let rows = ablate(&tc, &batch, &held)?;
        for r in &rows {
            let map = r.report.eval.as_ref().map_or(f64::NAN, |e| e.map);
            eprintln!("seed {seed} {:<14} loss {:.4} -> {:.4}  mAP {map:.4}", r.name, r.report.initial_loss(), r.report.final_loss());
        }
        runs.push(rows);
    }
    let means = mean_map(&runs);
    let mut table = String::from("config,dual_stream,tsp");
    for s in &seeds {
        table.push_str(&format!(",map_seed{s}"));
    }
    table.push_str(",mean_map,mean_nds\n");
    for (i, (name, mean)) in means.iter().enumerate() {
        let row = &runs[0][i];
        table.push_str(&format!("{name},{},{}", row.dual_stream.label(), row.tsp));
        let mut nds = 0.0;
        for run in &runs {
            let e = run[i].report.eval.as_ref();
            table.push_str(&format!(",{:.6}", e.map_or(f64::NAN, |e| e.map)));
            nds += e.map_or(0.0, |e| e.nds) / runs.len() as f64;
        }
        table.push_str(&format!(",{mean:.6},{nds:.6}\n"));
    }
    let mut rec = ctx.recorder("ablate");
    rec.write("ablation.csv", table.as_bytes())?;
    let detail: Vec<AblationSeed<'_>> = seeds.iter().zip(&runs).map(|(&seed, rows)| AblationSeed { seed, rows }).collect();
    rec.write("ablation.json", &json_bytes(&detail))?;
    rec.finish()?;
    print!("{table}");
    let violations = ordering_violations(&means);
    if violations.is_empty() {
        println!("ordering holds: full model >= every single module >= baseline");
        Ok(())
    } else {
        Err(Failure::property(format!("ablation ordering violated: {}", violations.join("; "))))
    }
}

fn eval(ctx: &Ctx<'_>, args: &EvalArgs) -> Result<(), Failure> {
    if args.scene.len() != args.detections.len() {
        return Err(Failure { code: 2, message: format!("{} scenes but {} detection files", args.scene.len(), args.detections.len()) });
    }
    let mut truths = Vec::with_capacity(args.scene.len());
    let mut dets = Vec::with_capacity(args.scene.len());
    for (s, d) in args.scene.iter().zip(&args.detections) {
        let path = if s.is_dir() { s.join(SCENE_FILE) } else { s.clone() };
        truths.push(read_scene(&path)?.boxes);
        dets.push(read_detections(d)?);
    }
    let frames: Vec<Frame<'_>> = dets.iter().zip(&truths).map(|(d, g)| Frame { detections: d, ground_truth: g }).collect();
    let result = evaluate(&frames, ctx.cfg.model.classes);
    let mut rec = ctx.recorder("eval");
    rec.write("eval.json", &encode_eval_json(&result))?;
    rec.write("eval.csv", &encode_eval_csv(&result)?)?;
    rec.finish()?;
    println!(
        "mAP {:.4}  mATE {:.4}  mASE {:.4}  mAOE {:.4}  mAVE {:.4}  NDS {:.4}",
        result.map, result.mate, result.mase, result.maoe, result.mave, result.nds
    );
    Ok(())
}

fn check(ctx: &Ctx<'_>, args: &CheckArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let reports: Vec<SuiteReport> = run_suites(args.suite.as_deref(), args.sabotage);
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.ok()).map(|r| r.name).collect();
    let total = start.elapsed().as_secs_f64();
    println!("{} suites, {} failed, {total:.1}s", reports.len(), failed.len());
    let mut rec = ctx.recorder("check");
    rec.write("check.json", &json_bytes(&reports))?;
    rec.finish()?;
    if reports.is_empty() {
        return Err(Failure::property("no suite matches the filter"));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::property(format!("failed suites: {}", failed.join(", "))))
    }
}
