//! End-to-end detector: LiDAR and camera branches, dual-stream camera BEV,
//! BEV fusion, candidate decoding and the optional task-specific branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::geometry::{BevConfig, CameraParams, DepthBins, CALIBRATION_DIM};
use crate::lidar::{compress_z, encode_voxels, voxelize, VoxelConfig, VoxelGrid, POINT_DIM};
use crate::nn::{conv3x3, init_conv, init_dense, init_mlp, Extent, ParamSet};
use crate::numerics::{Graph, Tensor};
use crate::predictor::{
    aux_heads, decode_detections, decode_general, heatmap_head, select_candidates, subtask_heads, task_specific_features,
    task_specific_fuse, CandidateSet, Detection, BOX_DIM,
};
use crate::scene::{default_rig, lidar_scan, render_camera, LidarConfig, ObjectBox, PointCloud, Scene};
use crate::view::{
    camera_encode, depth_ground_truth, depth_net, frustum_cells, fuse_camera_bev, plan_point_stream, point_stream,
    ray_stream, upsample_hr, DepthGroundTruth, PointPlan,
};

/// Focal prior bias `−ln((1 − π)/π)` for `π = 0.1`.
pub const PRIOR_BIAS: f64 = -2.19;
const CALIB_EMBED: usize = 8;

/// Which camera-to-BEV streams are active.
///
/// `Off` keeps an unsupervised ray stream as the camera baseline; `Ray`
/// adds depth supervision; `Point` adds the point stream to the
/// unsupervised ray stream; `Both` combines the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DualStream {
    Off,
    Ray,
    Point,
    Both,
}

impl DualStream {
    pub fn point_stream(self) -> bool {
        matches!(self, DualStream::Point | DualStream::Both)
    }

    pub fn depth_supervision(self) -> bool {
        matches!(self, DualStream::Ray | DualStream::Both)
    }

    pub fn label(self) -> &'static str {
        match self {
            DualStream::Off => "off",
            DualStream::Ray => "ray",
            DualStream::Point => "point",
            DualStream::Both => "both",
        }
    }
}

impl std::str::FromStr for DualStream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(DualStream::Off),
            "ray" => Ok(DualStream::Ray),
            "point" => Ok(DualStream::Point),
            "both" => Ok(DualStream::Both),
            other => Err(Error::Domain(format!("unknown dual-stream mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub image_channels: usize,
    /// Camera feature stride.
    pub stride: usize,
    pub classes: usize,
    pub bev: BevConfig,
    pub bins: DepthBins,
    pub voxel: VoxelConfig,
    pub lidar: LidarConfig,
    /// LR camera feature width.
    pub c_feat: usize,
    /// Ray-stream context width.
    pub c_context: usize,
    /// HR camera feature width read by the point stream.
    pub c_hr: usize,
    /// Camera BEV width.
    pub c_camera: usize,
    pub c_voxel: usize,
    pub c_lidar: usize,
    /// Fused BEV and query width.
    pub c_model: usize,
    pub hidden: usize,
    /// Candidate count.
    pub k: usize,
    pub dual_stream: DualStream,
    pub tsp: bool,
    /// Stop auxiliary-head gradients at the class and box features.
    #[serde(default)]
    pub aux_stop_grad: bool,
}

impl ModelConfig {
    /// Default desk-scale model: 64×48 images, 32×32 BEV, 10 classes.
    pub fn desk() -> Self {
        let bev = BevConfig::default();
        ModelConfig {
            image_width: 64,
            image_height: 48,
            image_channels: 4,
            stride: 4,
            classes: crate::scene::DEFAULT_CLASS_COUNT,
            bev,
            bins: DepthBins::default(),
            voxel: VoxelConfig::for_bev(&bev, (-0.5, 2.5), 0.5),
            lidar: LidarConfig::default(),
            c_feat: 16,
            c_context: 16,
            c_hr: 8,
            c_camera: 32,
            c_voxel: 8,
            c_lidar: 16,
            c_model: 32,
            hidden: 32,
            k: 32,
            dual_stream: DualStream::Both,
            tsp: true,
            aux_stop_grad: false,
        }
    }

    /// Small model used for training runs: 32×24 images, 16×16 BEV,
    /// 3 classes.
    pub fn tiny() -> Self {
        let bev = BevConfig { n: 16, ..BevConfig::default() };
        ModelConfig {
            image_width: 32,
            image_height: 24,
            image_channels: 4,
            stride: 4,
            classes: 3,
            bev,
            bins: DepthBins::new(0.5, 8.5, 8).expect("valid bins"),
            voxel: VoxelConfig::for_bev(&bev, (-0.5, 2.5), 0.5),
            lidar: LidarConfig { azimuth_count: 128, ..LidarConfig::default() },
            c_feat: 8,
            c_context: 8,
            c_hr: 8,
            c_camera: 12,
            c_voxel: 6,
            c_lidar: 12,
            c_model: 16,
            hidden: 16,
            k: 12,
            dual_stream: DualStream::Both,
            tsp: true,
            aux_stop_grad: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bev.validate()?;
        self.bins.validate()?;
        self.voxel.validate()?;
        let [x, y, _] = self.voxel.counts();
        if x != self.bev.n || y != self.bev.n {
            return Err(Error::Domain(format!(
                "voxel columns {x}×{y} must tile the {n}×{n} BEV grid",
                n = self.bev.n
            )));
        }
        let widths = [
            self.image_channels,
            self.c_feat,
            self.c_context,
            self.c_hr,
            self.c_camera,
            self.c_voxel,
            self.c_lidar,
            self.c_model,
            self.hidden,
        ];
        if widths.contains(&0) || self.classes == 0 || self.k == 0 || self.stride == 0 {
            return Err(Error::Domain("model widths, classes, k and stride must be ≥ 1".into()));
        }
        if !self.image_width.is_multiple_of(self.stride) || !self.image_height.is_multiple_of(self.stride) {
            return Err(Error::Domain(format!(
                "image {}×{} is not divisible by stride {}",
                self.image_width, self.image_height, self.stride
            )));
        }
        Ok(())
    }

    pub fn image_extent(&self) -> Extent {
        Extent::new(self.image_height, self.image_width)
    }

    pub fn feature_extent(&self) -> Extent {
        Extent::new(self.image_height / self.stride, self.image_width / self.stride)
    }

    pub fn cameras(&self) -> Vec<CameraParams> {
        default_rig(self.image_width, self.image_height)
    }

    /// Parameter-name prefixes that receive gradients under this
    /// configuration.
    pub fn trainable_groups(&self) -> Vec<&'static str> {
        let mut groups = vec!["lidar", "camera.enc0", "camera.enc1", "depth", "fuse", "bev_fuse", "heat", "decoder", "head"];
        if self.dual_stream.point_stream() {
            groups.push("camera.up");
        }
        if self.tsp {
            groups.extend(["tsp", "aux"]);
        }
        groups
    }
}

/// Parameters for `cfg`, deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut ps = ParamSet::new();
    let p = &mut ps;
    let [_, _, z] = cfg.voxel.counts();
    let c = cfg.c_model;
    let depth_in = cfg.c_feat + 2 + CALIB_EMBED;

    init_mlp(p, r, "lidar.voxel_mlp", POINT_DIM, cfg.c_voxel, cfg.c_voxel, true);
    init_dense(p, r, "lidar.compress", cfg.c_lidar, z * cfg.c_voxel, false);

    init_conv(p, r, "camera.enc0", cfg.c_feat, cfg.image_channels, false);
    init_conv(p, r, "camera.enc1", cfg.c_feat, cfg.c_feat, false);
    init_dense(p, r, "camera.up", cfg.stride * cfg.stride * cfg.c_hr, cfg.c_feat, false);

    init_dense(p, r, "depth.cam_embed", CALIB_EMBED, CALIBRATION_DIM, true);
    init_dense(p, r, "depth.context", cfg.c_context, depth_in, true);
    init_mlp(p, r, "depth.head", depth_in, cfg.hidden, cfg.bins.count, true);

    init_conv(p, r, "fuse.cam0", cfg.c_camera, cfg.c_context + cfg.c_hr, false);
    init_conv(p, r, "fuse.cam1", cfg.c_camera, cfg.c_camera, false);
    init_conv(p, r, "bev_fuse.0", c, cfg.c_camera + cfg.c_lidar, true);
    init_conv(p, r, "bev_fuse.1", c, c, true);

    init_conv(p, r, "heat.0", c, c, true);
    init_conv(p, r, "heat.1", cfg.classes, c, true);
    p.insert("heat.1.bias", Tensor::full(&[cfg.classes], PRIOR_BIAS));

    let limit = (6.0 / (cfg.classes + c) as f64).sqrt();
    let embed = (0..cfg.classes * c).map(|_| r.gen_range(-limit..limit)).collect();
    p.insert("decoder.class_embed", Tensor::new(vec![cfg.classes, c], embed)?);
    for name in ["decoder.q", "decoder.k", "decoder.v"] {
        init_dense(p, r, name, c, c, false);
    }
    init_mlp(p, r, "decoder.ffn", c, cfg.hidden, c, true);

    for head in ["head", "aux"] {
        if head == "aux" && !cfg.tsp {
            continue;
        }
        init_mlp(p, r, &format!("{head}.cls"), c, cfg.hidden, cfg.classes, true);
        p.insert(format!("{head}.cls.1.bias"), Tensor::full(&[cfg.classes], PRIOR_BIAS));
        init_mlp(p, r, &format!("{head}.box"), c, cfg.hidden, BOX_DIM, true);
    }

    if cfg.tsp {
        init_conv(p, r, "tsp.enc_cam0", c, cfg.c_camera, false);
        init_conv(p, r, "tsp.enc_cam1", c, c, false);
        init_conv(p, r, "tsp.enc_lidar0", c, cfg.c_lidar, false);
        init_conv(p, r, "tsp.enc_lidar1", c, c, false);
        for name in ["tsp.q", "tsp.k", "tsp.v"] {
            init_dense(p, r, name, c, c, false);
        }
        init_mlp(p, r, "tsp.ffn_cls", 2 * c, cfg.hidden, c, true);
        init_mlp(p, r, "tsp.ffn_box", 2 * c, cfg.hidden, c, true);
        for fuser in ["tsp.fuse_cls", "tsp.fuse_box"] {
            for part in ["gamma_s", "beta_s", "gamma_g", "beta_g"] {
                init_dense(p, r, &format!("{fuser}.{part}"), c, 2 * c, true);
            }
            // Modulation starts near identity.
            p.insert(format!("{fuser}.gamma_s.bias"), Tensor::full(&[c], 1.0));
            p.insert(format!("{fuser}.gamma_g.bias"), Tensor::full(&[c], 1.0));
            init_dense(p, r, &format!("{fuser}.psi"), c, 2 * c, true);
        }
    }
    Ok(ps)
}

/// Sensor data and geometry for one scene, computed once.
#[derive(Clone, Debug)]
pub struct SceneInput {
    pub cloud: PointCloud,
    pub grid: VoxelGrid,
    pub cameras: Vec<CameraParams>,
    /// `[H·W, C_img]` per camera.
    pub images: Vec<Tensor>,
    pub depth_targets: Vec<DepthGroundTruth>,
    pub frustum: Vec<Vec<Option<usize>>>,
    pub plan: PointPlan,
    pub ground_truth: Vec<ObjectBox>,
}

impl SceneInput {
    /// Scans, renders and plans `scene` for `cfg`.
    pub fn prepare(scene: &Scene, cfg: &ModelConfig) -> Result<Self> {
        let cloud = lidar_scan(scene, &cfg.lidar.origin, cfg.lidar.azimuth_count, &cfg.lidar.elevations)?;
        let cameras = cfg.cameras();
        let mut images = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let (img, _) = render_camera(scene, cam, cfg.image_channels)?;
            images.push(img.reshaped(&[cam.height * cam.width, cfg.image_channels])?);
        }
        SceneInput::from_parts(cloud, cameras, images, scene.boxes.clone(), cfg)
    }

    /// Builds the derived geometry from raw sensor data.
    pub fn from_parts(
        cloud: PointCloud,
        cameras: Vec<CameraParams>,
        images: Vec<Tensor>,
        ground_truth: Vec<ObjectBox>,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if images.len() != cameras.len() {
            return Err(Error::dim(format!("{} images for {} cameras", images.len(), cameras.len())));
        }
        for (cam, img) in cameras.iter().zip(&images) {
            if cam.width != cfg.image_width || cam.height != cfg.image_height {
                return Err(Error::dim(format!(
                    "camera is {}×{}, model expects {}×{}",
                    cam.width, cam.height, cfg.image_width, cfg.image_height
                )));
            }
            if img.shape() != [cam.height * cam.width, cfg.image_channels] {
                return Err(Error::dim(format!("image {:?} does not fit its camera", img.shape())));
            }
        }
        let grid = voxelize(&cloud, &cfg.voxel)?;
        let fe = cfg.feature_extent();
        let depth_targets = cameras
            .iter()
            .map(|c| depth_ground_truth(&cloud, c, &cfg.bins, cfg.stride))
            .collect::<Result<Vec<_>>>()?;
        let frustum = cameras.iter().map(|c| frustum_cells(c, &cfg.bins, &cfg.bev, fe, cfg.stride)).collect();
        let plan = plan_point_stream(&cloud, &cameras, &cfg.bev);
        Ok(SceneInput { cloud, grid, cameras, images, depth_targets, frustum, plan, ground_truth })
    }
}

/// Graph values produced by one forward pass.
pub struct ForwardOutput<V> {
    pub ray_bev: V,
    pub point_bev: Option<V>,
    pub camera_bev: V,
    pub lidar_bev: V,
    pub fused_bev: V,
    /// `[n², N]` heatmap probabilities.
    pub heat: V,
    pub cands: CandidateSet,
    pub logits: V,
    pub boxes: V,
    pub aux: Option<(V, V)>,
    /// `[P, D]` depth distribution per camera.
    pub depth_probs: Vec<V>,
}

/// Runs the detector. `heat_override` replaces the predicted heatmap for
/// candidate selection only.
pub fn forward<G: Graph>(
    g: &mut G,
    ps: &ParamSet,
    cfg: &ModelConfig,
    input: &SceneInput,
    heat_override: Option<&Tensor>,
) -> Result<ForwardOutput<G::V>> {
    let n = cfg.bev.n;
    let cells = cfg.bev.cells();

    let lidar_bev = {
        let m = encode_voxels(g, ps, &input.grid, cfg.voxel.max_voxels).in_module("lidar_pipeline")?;
        compress_z(g, ps, &m, input.grid.counts).in_module("lidar_pipeline")?
    };

    let mut ray_sum: Option<G::V> = None;
    let mut hr_maps = Vec::new();
    let mut depth_probs = Vec::new();
    for (i, cam) in input.cameras.iter().enumerate() {
        let img = g.constant(input.images[i].clone());
        let (lr, fe) = camera_encode(g, ps, &img, cfg.image_extent(), cfg.stride).in_module("view_transform")?;
        let (ctx, probs) = depth_net(g, ps, &lr, fe, cam, cfg.stride).in_module("view_transform")?;
        let ray = ray_stream(g, &ctx, &probs, &input.frustum[i], &cfg.bev).in_module("view_transform")?;
        ray_sum = Some(match ray_sum {
            Some(s) => g.add(&s, &ray)?,
            None => ray,
        });
        depth_probs.push(probs);
        if cfg.dual_stream.point_stream() {
            let (hr, _) = upsample_hr(g, ps, &lr, fe, cfg.stride).in_module("view_transform")?;
            hr_maps.push(hr);
        }
    }
    let ray_bev = ray_sum.unwrap_or_else(|| g.constant(Tensor::zeros(&[cells, cfg.c_context])));
    let point_bev = if cfg.dual_stream.point_stream() {
        Some(point_stream(g, &hr_maps, &input.plan, &cfg.bev).in_module("view_transform")?)
    } else {
        None
    };
    let point_in = match &point_bev {
        Some(p) => p.clone(),
        None => g.constant(Tensor::zeros(&[cells, cfg.c_hr])),
    };
    let camera_bev = fuse_camera_bev(g, ps, &ray_bev, &point_in, &cfg.bev).in_module("view_transform")?;

    let fused_bev = {
        let e = Extent::new(n, n);
        let x = g.concat(&[camera_bev.clone(), lidar_bev.clone()], 1)?;
        let (h, _) = conv3x3(g, ps, "bev_fuse.0", &x, e, 1)?;
        let h = g.relu(&h)?;
        let (h, _) = conv3x3(g, ps, "bev_fuse.1", &h, e, 1)?;
        g.relu(&h)?
    };

    let heat = heatmap_head(g, ps, &fused_bev, n).in_module("predictor")?;
    let select_from = heat_override.unwrap_or_else(|| g.value(&heat));
    let cands = select_candidates(select_from, n, cfg.k).in_module("predictor")?;
    let (f_g, _) = decode_general(g, ps, &fused_bev, &cands, n).in_module("predictor")?;

    let (logits, boxes, aux) = if cfg.tsp {
        let tf = task_specific_features(g, ps, &camera_bev, &lidar_bev, &cands, n).in_module("predictor")?;
        let q_cls = task_specific_fuse(g, ps, "tsp.fuse_cls", &f_g, &tf.f_cls)?;
        let q_box = task_specific_fuse(g, ps, "tsp.fuse_box", &f_g, &tf.f_box)?;
        let (logits, boxes) = subtask_heads(g, ps, "head", &q_cls, &q_box)?;
        let (f_cls, f_box) = if cfg.aux_stop_grad {
            (g.constant(g.value(&tf.f_cls).clone()), g.constant(g.value(&tf.f_box).clone()))
        } else {
            (tf.f_cls, tf.f_box)
        };
        let aux = aux_heads(g, ps, &f_cls, &f_box)?;
        (logits, boxes, Some(aux))
    } else {
        let (logits, boxes) = subtask_heads(g, ps, "head", &f_g, &f_g)?;
        (logits, boxes, None)
    };

    Ok(ForwardOutput {
        ray_bev,
        point_bev,
        camera_bev,
        lidar_bev,
        fused_bev,
        heat,
        cands,
        logits,
        boxes,
        aux,
        depth_probs,
    })
}

/// Inference-time detections from a forward pass.
pub fn detections<G: Graph>(g: &G, out: &ForwardOutput<G::V>, cfg: &ModelConfig) -> Result<Vec<Detection>> {
    decode_detections(g.value(&out.logits), g.value(&out.boxes), &out.cands, &cfg.bev)
}

/// Ground-truth heatmap with 1.0 at the cell under each box center.
pub fn oracle_heatmap(gts: &[ObjectBox], bev: &BevConfig, classes: usize) -> Result<Tensor> {
    let mut heat = Tensor::zeros(&[bev.cells(), classes]);
    for b in gts {
        if b.class_id >= classes {
            return Err(Error::Domain(format!("class {} out of range", b.class_id)));
        }
        if let Some(cell) = bev.flat_index(b.center[0], b.center[1]) {
            heat.set(&[cell, b.class_id], 1.0);
        }
    }
    Ok(heat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_probe, Eager, Tape};
    use crate::scene::generate_scene;

    fn tiny_input(seed: u64, boxes: usize, cfg: &ModelConfig) -> SceneInput {
        let scene = generate_scene(boxes, &cfg.bev, cfg.classes, seed).unwrap();
        SceneInput::prepare(&scene, cfg).unwrap()
    }

    #[test]
    fn configs_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        let bad = ModelConfig { stride: 5, ..ModelConfig::tiny() };
        assert!(bad.validate().is_err());
        let mismatched = ModelConfig { bev: BevConfig { n: 8, ..BevConfig::default() }, ..ModelConfig::tiny() };
        assert!(mismatched.validate().is_err());
    }

    #[test]
    fn forward_shapes_for_every_toggle() {
        for ds in [DualStream::Off, DualStream::Ray, DualStream::Point, DualStream::Both] {
            for tsp in [false, true] {
                let cfg = ModelConfig { dual_stream: ds, tsp, ..ModelConfig::tiny() };
                let ps = init_params(&cfg, 3).unwrap();
                let input = tiny_input(4, 3, &cfg);
                let mut g = Eager;
                let out = forward(&mut g, &ps, &cfg, &input, None).unwrap();
                let cells = cfg.bev.cells();
                assert_eq!(out.heat.shape(), [cells, cfg.classes]);
                assert_eq!(out.fused_bev.shape(), [cells, cfg.c_model]);
                assert!(out.cands.len() <= cfg.k && !out.cands.is_empty());
                assert_eq!(out.logits.shape(), [out.cands.len(), cfg.classes]);
                assert_eq!(out.boxes.shape(), [out.cands.len(), BOX_DIM]);
                assert_eq!(out.aux.is_some(), tsp);
                assert_eq!(out.point_bev.is_some(), ds.point_stream());
                let dets = detections(&g, &out, &cfg).unwrap();
                assert_eq!(dets.len(), out.cands.len());
                assert!(dets.iter().all(|d| d.score > 0.0 && d.score < 1.0));
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_complete() {
        let cfg = ModelConfig::tiny();
        let a = init_params(&cfg, 7).unwrap();
        assert_eq!(a, init_params(&cfg, 7).unwrap());
        assert_ne!(a, init_params(&cfg, 8).unwrap());
        for group in cfg.trainable_groups() {
            assert!(a.names().any(|n| n.starts_with(group)), "{group}");
        }
        let off = init_params(&ModelConfig { tsp: false, ..cfg }, 7).unwrap();
        assert!(!off.names().any(|n| n.starts_with("tsp") || n.starts_with("aux")));
    }

    #[test]
    fn oracle_heatmap_decodes_to_cell_centers() {
        let cfg = ModelConfig::tiny();
        let mut ps = init_params(&cfg, 1).unwrap();
        for name in ["head.box.1.weight", "head.box.1.bias"] {
            ps.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let input = tiny_input(12, 4, &cfg);
        let heat = oracle_heatmap(&input.ground_truth, &cfg.bev, cfg.classes).unwrap();
        let mut g = Eager;
        let out = forward(&mut g, &ps, &cfg, &input, Some(&heat)).unwrap();
        let dets = detections(&g, &out, &cfg).unwrap();
        let top: Vec<&Detection> = dets.iter().take(input.ground_truth.len()).collect();
        for gt in &input.ground_truth {
            let (gx, gy) = cfg.bev.bev_index(gt.center[0], gt.center[1]).unwrap();
            let (cx, cy) = cfg.bev.cell_center(gx, gy);
            assert!(
                top.iter().any(|d| d.center[0] == cx && d.center[1] == cy),
                "no detection at the cell of {gt:?}"
            );
        }
    }

    #[test]
    fn pipeline_gradient_probe() {
        let cfg = ModelConfig { k: 6, ..ModelConfig::tiny() };
        let ps = init_params(&cfg, 2).unwrap();
        let input = tiny_input(5, 3, &cfg);
        let w = crate::losses::LossWeights::default();
        for name in ["lidar.compress.weight", "depth.head.1.weight", "tsp.fuse_box.psi.weight", "bev_fuse.0.weight"] {
            let x = ps.get(name).unwrap().clone();
            let err = finite_diff_probe(
                |t: &mut Tape, v| {
                    t.bind(name, v);
                    let out = forward(t, &ps, &cfg, &input, None)?;
                    crate::training::objective(t, &out, &input, &cfg, &w).map(|(l, _)| l)
                },
                &x,
                &[0, 1, 2, 3],
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-3, "{name}: {err}");
        }
    }
}
