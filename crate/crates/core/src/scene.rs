//! Synthetic worlds and the sensors that observe them.
//!
//! A scene is a ground plane `z = 0` with yawed cuboids resting on it. The
//! LiDAR and the camera share one ray caster, so both see the same first
//! surface along any ray.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot3, BevConfig, CameraParams, Vec3};
use crate::numerics::Tensor;

pub const DEFAULT_CLASS_COUNT: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectBox {
    pub center: Vec3,
    /// Length (along heading), width, height.
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
}

impl ObjectBox {
    /// Footprint corners in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.size[0] / 2.0;
        let hw = self.size[1] / 2.0;
        let mut out = [[0.0; 2]; 4];
        for (k, (a, b)) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].into_iter().enumerate() {
            out[k] = [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b];
        }
        out
    }

    /// Half-diagonal of the footprint.
    pub fn footprint_radius(&self) -> f64 {
        (self.size[0].hypot(self.size[1])) / 2.0
    }

    /// Slab-method intersection. Returns the entry distance and the outward
    /// world normal of the entered face, for rays starting outside the box.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        let (s, c) = self.yaw.sin_cos();
        let rel = [
            origin[0] - self.center[0],
            origin[1] - self.center[1],
            origin[2] - self.center[2],
        ];
        // Rotate into the box frame by -yaw.
        let o = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
        let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
        let half = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        let mut axis = 0;
        let mut sign = 0.0;
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a].abs() > half[a] {
                    return None;
                }
                continue;
            }
            let t1 = (-half[a] - o[a]) / d[a];
            let t2 = (half[a] - o[a]) / d[a];
            let (near, far, face) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
            if near > t_enter {
                t_enter = near;
                axis = a;
                sign = face;
            }
            t_exit = t_exit.min(far);
        }
        if t_enter > t_exit || t_enter <= 1e-9 {
            return None;
        }
        let mut n_box = [0.0; 3];
        n_box[axis] = sign;
        let normal = [c * n_box[0] - s * n_box[1], s * n_box[0] + c * n_box[1], n_box[2]];
        Some((t_enter, normal))
    }
}

/// Separating-axis test on two footprints; touching edges do not overlap.
pub fn footprints_overlap(a: &ObjectBox, b: &ObjectBox) -> bool {
    let pa = a.footprint();
    let pb = b.footprint();
    for poly in [&pa, &pb] {
        for k in 0..4 {
            let e = [poly[(k + 1) % 4][0] - poly[k][0], poly[(k + 1) % 4][1] - poly[k][1]];
            let axis = [-e[1], e[0]];
            let proj = |p: &[[f64; 2]; 4]| {
                p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
                    let v = q[0] * axis[0] + q[1] * axis[1];
                    (lo.min(v), hi.max(v))
                })
            };
            let (alo, ahi) = proj(&pa);
            let (blo, bhi) = proj(&pb);
            if ahi <= blo || bhi <= alo {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub seed: u64,
    #[serde(default)]
    pub boxes: Vec<ObjectBox>,
}

/// LiDAR returns as `(x, y, z, intensity, dt)` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 5]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xyz(&self, i: usize) -> Vec3 {
        let p = &self.points[i];
        [p[0], p[1], p[2]]
    }
}

/// Size template `(l, w, h)` for a class; classes cycle through a few shapes.
pub fn class_size(class_id: usize) -> [f64; 3] {
    [
        0.8 + 0.2 * (class_id % 5) as f64,
        0.5 + 0.15 * (class_id % 3) as f64,
        0.4 + 0.1 * (class_id % 4) as f64,
    ]
}

/// Boxes stay this far (plus their own radius) from the sensor origin.
const ORIGIN_CLEARANCE: f64 = 1.5;

pub fn generate_scene(num_boxes: usize, bev: &BevConfig, class_count: usize, seed: u64) -> Result<Scene> {
    bev.validate()?;
    if class_count == 0 {
        return Err(Error::Domain("class_count must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes: Vec<ObjectBox> = Vec::with_capacity(num_boxes);
    let max_attempts = 10 * num_boxes;
    let mut attempts = 0;
    while boxes.len() < num_boxes {
        if attempts == max_attempts {
            return Err(Error::Placement {
                requested: num_boxes,
                placed: boxes.len(),
                attempts,
            });
        }
        attempts += 1;
        let class_id = rng.gen_range(0..class_count);
        let template = class_size(class_id);
        let jitter = rng.gen_range(0.9..1.1);
        let size = template.map(|v| v * jitter);
        let yaw = rng.gen_range(-PI..PI);
        let velocity = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let r = size[0].hypot(size[1]) / 2.0;
        let (x_lo, x_hi) = (bev.x_min + r, bev.x_max - r);
        let (y_lo, y_hi) = (bev.y_min + r, bev.y_max - r);
        if !(x_hi > x_lo && y_hi > y_lo) {
            continue;
        }
        let x = rng.gen_range(x_lo..x_hi);
        let y = rng.gen_range(y_lo..y_hi);
        let candidate = ObjectBox {
            center: [x, y, size[2] / 2.0],
            size,
            yaw,
            velocity,
            class_id,
        };
        if x.hypot(y) < ORIGIN_CLEARANCE + r {
            continue;
        }
        if boxes.iter().any(|b| footprints_overlap(b, &candidate)) {
            continue;
        }
        boxes.push(candidate);
    }
    Ok(Scene { seed, boxes })
}

/// First surface along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals distance when the direction is unit length.
    pub t: f64,
    /// Box index, or `None` for the ground plane.
    pub object: Option<usize>,
    pub normal: Vec3,
}

impl Scene {
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if dir[2] < 0.0 && origin[2] > 0.0 {
            best = Some(Hit {
                t: -origin[2] / dir[2],
                object: None,
                normal: [0.0, 0.0, 1.0],
            });
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if let Some((t, normal)) = b.intersect(origin, dir) {
                if best.is_none_or(|h| t < h.t) {
                    best = Some(Hit {
                        t,
                        object: Some(i),
                        normal,
                    });
                }
            }
        }
        best
    }
}

/// Spinning LiDAR description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarConfig {
    pub origin: Vec3,
    pub azimuth_count: usize,
    /// Elevation angles in radians, negative pointing down.
    pub elevations: Vec<f64>,
}

impl Default for LidarConfig {
    fn default() -> Self {
        let rows = 16;
        let (lo, hi) = (-0.6f64, 0.05f64);
        LidarConfig {
            origin: [0.0, 0.0, 1.0],
            azimuth_count: 256,
            elevations: (0..rows)
                .map(|i| lo + (hi - lo) * i as f64 / (rows - 1) as f64)
                .collect(),
        }
    }
}

/// Casts `azimuth_count` rays per elevation, elevation-major, and keeps the
/// first hit of each.
pub fn lidar_scan(scene: &Scene, origin: &Vec3, azimuth_count: usize, elevations: &[f64]) -> Result<PointCloud> {
    if !(origin[2] > 0.0) {
        return Err(Error::Domain("LiDAR origin must be above the ground".into()));
    }
    let rays = elevations.len() * azimuth_count;
    let points = (0..rays)
        .into_par_iter()
        .filter_map(|r| {
            let el = elevations[r / azimuth_count];
            let az = 2.0 * PI * (r % azimuth_count) as f64 / azimuth_count as f64;
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            scene.cast(origin, &dir).map(|h| {
                [
                    origin[0] + h.t * dir[0],
                    origin[1] + h.t * dir[1],
                    origin[2] + h.t * dir[2],
                    1.0,
                    0.0,
                ]
            })
        })
        .collect();
    Ok(PointCloud { points })
}

/// Default two-camera rig: front and front-left, 60° apart.
pub fn default_rig(width: usize, height: usize) -> Vec<CameraParams> {
    [0.0, PI / 3.0]
        .iter()
        .map(|&yaw| {
            CameraParams::looking([0.0, 0.0, 1.0], yaw, 0.35, 70f64.to_radians(), width, height)
                .expect("default rig pose is valid")
        })
        .collect()
}

const AMBIENT: f64 = 0.1;

fn shade(feature: &mut [f64], hit: &Hit, scene: &Scene, dir_unit: &Vec3) {
    let c = feature.len();
    let s = 0.5 + 0.5 * dot3(&hit.normal, dir_unit).abs();
    match (hit.object, c) {
        (Some(_), 1) => feature[0] += s,
        (None, 1) => feature[0] += 0.5 * s,
        (Some(i), _) => feature[scene.boxes[i].class_id % (c - 1)] += s,
        (None, _) => feature[c - 1] += s,
    }
    for v in feature.iter_mut() {
        *v += AMBIENT;
    }
}

/// Optical-axis depth of the first surface seen through continuous image
/// coordinate `(u, v)`; `+∞` for sky.
pub fn cast_depth(scene: &Scene, cam: &CameraParams, u: f64, v: f64) -> f64 {
    let dir = cam.ray_direction(u, v);
    scene.cast(&cam.center(), &dir).map_or(f64::INFINITY, |h| h.t)
}

/// Renders a `[H, W, C]` feature image and a `[H, W]` optical-axis depth
/// image through pixel centers.
pub fn render_camera(scene: &Scene, cam: &CameraParams, channels: usize) -> Result<(Tensor, Tensor)> {
    if channels == 0 {
        return Err(Error::Domain("camera needs at least one channel".into()));
    }
    let (h, w) = (cam.height, cam.width);
    let origin = cam.center();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut feat = vec![0.0; w * channels];
            let mut depth = vec![f64::INFINITY; w];
            for x in 0..w {
                let dir = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
                if let Some(hit) = scene.cast(&origin, &dir) {
                    depth[x] = hit.t;
                    let norm = dot3(&dir, &dir).sqrt();
                    let unit = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
                    shade(&mut feat[x * channels..(x + 1) * channels], &hit, scene, &unit);
                }
            }
            (feat, depth)
        })
        .collect();
    let mut feat = Vec::with_capacity(h * w * channels);
    let mut depth = Vec::with_capacity(h * w);
    for (f, d) in rows {
        feat.extend(f);
        depth.extend(d);
    }
    Ok((Tensor::new(vec![h, w, channels], feat)?, Tensor::new(vec![h, w], depth)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_camera;

    fn unit_box(center: Vec3, class_id: usize) -> ObjectBox {
        ObjectBox {
            center,
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
            velocity: [0.0, 0.0],
            class_id,
        }
    }

    #[test]
    fn empty_and_deterministic_generation() {
        let bev = BevConfig::default();
        assert!(generate_scene(0, &bev, 10, 3).unwrap().boxes.is_empty());
        let a = generate_scene(6, &bev, 10, 11).unwrap();
        let b = generate_scene(6, &bev, 10, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(6, &bev, 10, 12).unwrap());
    }

    /// Brute-force overlap check: sample points in one footprint and test
    /// containment in the other.
    fn sampled_overlap(a: &ObjectBox, b: &ObjectBox) -> bool {
        let inside = |bx: &ObjectBox, p: [f64; 2]| {
            let (s, c) = bx.yaw.sin_cos();
            let dx = p[0] - bx.center[0];
            let dy = p[1] - bx.center[1];
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            lx.abs() < bx.size[0] / 2.0 && ly.abs() < bx.size[1] / 2.0
        };
        let (s, c) = a.yaw.sin_cos();
        let steps = 60;
        (0..=steps).any(|i| {
            (0..=steps).any(|j| {
                let lx = (i as f64 / steps as f64 - 0.5) * a.size[0] * 0.999;
                let ly = (j as f64 / steps as f64 - 0.5) * a.size[1] * 0.999;
                inside(b, [a.center[0] + c * lx - s * ly, a.center[1] + s * lx + c * ly])
            })
        })
    }

    #[test]
    fn generated_footprints_are_disjoint_and_inside() {
        let bev = BevConfig::default();
        let scene = generate_scene(5, &bev, 10, 7).unwrap();
        assert_eq!(scene.boxes.len(), 5);
        for (i, a) in scene.boxes.iter().enumerate() {
            for c in a.footprint() {
                assert!(bev.contains(c[0], c[1]));
            }
            assert!(a.size.iter().all(|&s| s > 0.0));
            for b in &scene.boxes[i + 1..] {
                assert!(!footprints_overlap(a, b));
                assert!(!sampled_overlap(a, b) && !sampled_overlap(b, a));
            }
        }
    }

    #[test]
    fn sat_agrees_with_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let mk = |rng: &mut ChaCha8Rng| ObjectBox {
                center: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.5],
                size: [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), 1.0],
                yaw: rng.gen_range(-PI..PI),
                velocity: [0.0; 2],
                class_id: 0,
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let sampled = sampled_overlap(&a, &b) || sampled_overlap(&b, &a);
            // Sampling can miss slivers, never invent overlap.
            if sampled {
                assert!(footprints_overlap(&a, &b));
            }
        }
    }

    #[test]
    fn placement_failure_is_reported() {
        let tiny = BevConfig {
            x_min: -2.0,
            x_max: 2.0,
            y_min: -2.0,
            y_max: 2.0,
            n: 4,
        };
        let err = generate_scene(50, &tiny, 3, 1).unwrap_err();
        assert!(matches!(err, Error::Placement { requested: 50, attempts: 500, .. }));
    }

    #[test]
    fn lidar_on_empty_scene_hits_ground() {
        let scene = Scene { seed: 0, boxes: vec![] };
        let pc = lidar_scan(&scene, &[0.0, 0.0, 1.5], 32, &[-0.5, -0.2]).unwrap();
        assert_eq!(pc.len(), 64);
        assert!(pc.points.iter().all(|p| p[2].abs() < 1e-12 && p[3] == 1.0 && p[4] == 0.0));
        let flat = lidar_scan(&scene, &[0.0, 0.0, 1.5], 32, &[0.0]).unwrap();
        assert!(flat.is_empty());
    }

    #[test]
    fn lidar_returns_first_hit_only() {
        let scene = Scene {
            seed: 0,
            boxes: vec![unit_box([3.0, 0.0, 0.5], 0), unit_box([6.0, 0.0, 0.5], 1)],
        };
        let pc = lidar_scan(&scene, &[0.0, 0.0, 0.5], 4, &[0.0]).unwrap();
        // Azimuth 0 hits the near face of the first box; the other three
        // directions see nothing.
        assert_eq!(pc.len(), 1);
        assert!((pc.points[0][0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn ground_depth_matches_plane_formula() {
        let scene = Scene { seed: 0, boxes: vec![] };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let cam = random_camera(&mut rng);
            let (feat, depth) = render_camera(&scene, &cam, 4).unwrap();
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
                    // z(d) is affine in d; solve z(d) = 0 from two samples.
                    let z1 = cam.unproject(u, v, 1.0).unwrap()[2];
                    let z2 = cam.unproject(u, v, 2.0).unwrap()[2];
                    let slope = z2 - z1;
                    let want = if slope < 0.0 { 1.0 - z1 / slope } else { f64::INFINITY };
                    let got = depth.get(&[y, x]);
                    if want.is_finite() {
                        assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
                    } else {
                        assert!(got.is_infinite());
                        assert!((0..4).all(|c| feat.get(&[y, x, c]) == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn box_filling_view_bounds_depth() {
        let big = ObjectBox {
            center: [3.0, 0.0, 1.0],
            size: [2.0, 40.0, 40.0],
            yaw: 0.0,
            velocity: [0.0; 2],
            class_id: 2,
        };
        let scene = Scene { seed: 0, boxes: vec![big] };
        let cam = CameraParams::looking([0.0, 0.0, 1.0], 0.0, 0.0, 0.6, 16, 16).unwrap();
        let (feat, depth) = render_camera(&scene, &cam, 4).unwrap();
        assert!(depth.data().iter().all(|&d| (2.0 - 1e-12..=4.0 + 1e-12).contains(&d)));
        // Class 2 lands in channel 2; the ground channel stays ambient.
        assert!(feat.get(&[8, 8, 2]) > 0.5 && (feat.get(&[8, 8, 3]) - AMBIENT).abs() < 1e-12);
    }

    #[test]
    fn lidar_points_are_visible_to_cameras() {
        let bev = BevConfig::default();
        for seed in 0..5 {
            let scene = generate_scene(8, &bev, 10, seed).unwrap();
            let lidar = LidarConfig::default();
            let pc = lidar_scan(&scene, &lidar.origin, lidar.azimuth_count, &lidar.elevations).unwrap();
            for cam in default_rig(64, 64) {
                for i in 0..pc.len() {
                    if let Some(p) = cam.project(&pc.xyz(i)) {
                        assert!(cast_depth(&scene, &cam, p.u, p.v) <= p.depth + 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = generate_scene(5, &BevConfig::default(), 10, 2).unwrap();
        let cam = &default_rig(32, 32)[0];
        assert_eq!(render_camera(&scene, cam, 3).unwrap(), render_camera(&scene, cam, 3).unwrap());
    }
}
