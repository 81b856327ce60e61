//! Pinhole cameras, depth bins and BEV grid indexing.
//!
//! Conventions:
//! - world frame: x forward, y left, z up, meters;
//! - camera frame: x right, y down, z along the optical axis;
//! - poses are camera-from-world: `p_cam = R·p_world + t`;
//! - pixel `(i, j)` covers `[i, i+1) × [j, j+1)`, so a continuous image
//!   coordinate `u` belongs to pixel `floor(u)`;
//! - every interval is half-open, so boundary points have exactly one owner.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub(crate) fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn mat_t_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn det(m: &Mat3) -> f64 {
    dot3(&m[0], &cross(&m[1], &m[2]))
}

/// Intrinsics plus a camera-from-world pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraParams {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major rotation, camera-from-world.
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// Pixel containing the projection.
    pub fn pixel(&self) -> (usize, usize) {
        (self.u.floor() as usize, self.v.floor() as usize)
    }
}

impl CameraParams {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        let cam = CameraParams {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `position` heading along world yaw `yaw`, tilted down by
    /// `pitch` radians, with a symmetric field of view `hfov` across `width`.
    pub fn looking(position: Vec3, yaw: f64, pitch: f64, hfov: f64, width: usize, height: usize) -> Result<Self> {
        let forward = [
            yaw.cos() * pitch.cos(),
            yaw.sin() * pitch.cos(),
            -pitch.sin(),
        ];
        let right = [yaw.sin(), -yaw.cos(), 0.0];
        let down = cross(&forward, &right);
        let rotation = [right, down, forward];
        let t = mat_vec(&rotation, &position);
        let f = width as f64 / 2.0 / (hfov / 2.0).tan();
        CameraParams::new(
            f,
            f,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            [-t[0], -t[1], -t[2]],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Domain(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain("image size must be positive".into()));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot3(&r[i], &r[j]) - want).abs() > 1e-9 {
                    return Err(Error::Domain("rotation is not orthonormal".into()));
                }
            }
        }
        if (det(r) - 1.0).abs() > 1e-9 {
            return Err(Error::Domain("rotation has determinant != +1".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        let q = mat_vec(&self.rotation, p);
        [q[0] + self.translation[0], q[1] + self.translation[1], q[2] + self.translation[2]]
    }

    pub fn to_world(&self, p_cam: &Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, &sub(p_cam, &self.translation))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.to_world(&[0.0, 0.0, 0.0])
    }

    /// Projects a world point; `None` when behind the camera or outside the
    /// image.
    pub fn project(&self, p: &Vec3) -> Option<Projection> {
        let q = self.to_camera(p);
        if !(q[2] > 1e-6) {
            return None;
        }
        let u = self.fx * q[0] / q[2] + self.cx;
        let v = self.fy * q[1] / q[2] + self.cy;
        let inside = u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        inside.then_some(Projection { u, v, depth: q[2] })
    }

    /// World point at optical-axis depth `depth` along the ray through `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) {
            return Err(Error::Domain(format!("unproject needs depth > 0, got {depth}")));
        }
        let q = [
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ];
        Ok(self.to_world(&q))
    }

    /// World-frame direction of the ray through `(u, v)`, scaled so that one
    /// unit of travel adds one unit of optical-axis depth.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let q = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        mat_t_vec(&self.rotation, &q)
    }

    /// Flattened calibration used to condition the depth network: normalized
    /// intrinsics, rotation, and camera center.
    pub fn calibration_vector(&self) -> Vec<f64> {
        let mut v = vec![
            self.fx / self.width as f64,
            self.fy / self.height as f64,
            self.cx / self.width as f64,
            self.cy / self.height as f64,
        ];
        for row in &self.rotation {
            v.extend_from_slice(row);
        }
        v.extend_from_slice(&self.center());
        v
    }
}

/// A random valid 64×48 camera near the origin, used by property suites.
pub fn random_camera<R: Rng>(rng: &mut R) -> CameraParams {
    let pos = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.5..3.0)];
    let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let pitch = rng.gen_range(-0.3..0.8);
    let mut cam = CameraParams::looking(pos, yaw, pitch, rng.gen_range(0.6..1.8), 64, 48).unwrap();
    cam.fy *= rng.gen_range(0.8..1.2);
    cam.cx += rng.gen_range(-4.0..4.0);
    cam.cy += rng.gen_range(-4.0..4.0);
    cam
}

pub const CALIBRATION_DIM: usize = 16;

/// Uniform depth discretization over `[d_min, d_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl Default for DepthBins {
    fn default() -> Self {
        DepthBins {
            d_min: 0.5,
            d_max: 8.5,
            count: 16,
        }
    }
}

impl DepthBins {
    pub fn new(d_min: f64, d_max: f64, count: usize) -> Result<Self> {
        let b = DepthBins { d_min, d_max, count };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.count > 0) {
            return Err(Error::Domain(format!("invalid depth bins {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.count as f64
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.d_min + (bin as f64 + 0.5) * self.width()
    }

    /// Bin index of `depth`, or `None` outside `[d_min, d_max)`.
    pub fn depth_to_bin(&self, depth: f64) -> Option<usize> {
        if !(depth >= self.d_min && depth < self.d_max) {
            return None;
        }
        let i = ((depth - self.d_min) / self.width()).floor() as usize;
        Some(i.min(self.count - 1))
    }
}

/// Square BEV grid over `[x_min, x_max) × [y_min, y_max)` with `n` cells per
/// edge. Cell `(gx, gy)` has flat index `gx·n + gy`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub n: usize,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            x_min: -8.0,
            x_max: 8.0,
            y_min: -8.0,
            y_max: 8.0,
            n: 32,
        }
    }
}

impl BevConfig {
    /// 180×180 grid over ±54 m, 0.6 m per cell.
    pub fn paper_scale() -> Self {
        BevConfig {
            x_min: -54.0,
            x_max: 54.0,
            y_min: -54.0,
            y_max: 54.0,
            n: 180,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > self.x_min && self.y_max > self.y_min && self.n >= 1) {
            return Err(Error::Domain(format!("invalid BEV config {self:?}")));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.x_max - self.x_min) / self.n as f64,
            (self.y_max - self.y_min) / self.n as f64,
        )
    }

    pub fn bev_index(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let gx = axis_index(x, self.x_min, self.x_max, self.n)?;
        let gy = axis_index(y, self.y_min, self.y_max, self.n)?;
        Some((gx, gy))
    }

    pub fn flat_index(&self, x: f64, y: f64) -> Option<usize> {
        self.bev_index(x, y).map(|(gx, gy)| gx * self.n + gy)
    }

    pub fn cell_center(&self, gx: usize, gy: usize) -> (f64, f64) {
        let (sx, sy) = self.cell_size();
        (
            self.x_min + (gx as f64 + 0.5) * sx,
            self.y_min + (gy as f64 + 0.5) * sy,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

fn axis_index(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(v >= lo && v < hi) {
        return None;
    }
    let i = ((v - lo) * n as f64 / (hi - lo)).floor() as usize;
    Some(i.min(n - 1))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn simple(fx: f64, cx: f64) -> CameraParams {
        CameraParams::new(fx, fx, cx, cx, 64, 64, IDENTITY, [0.0; 3]).unwrap()
    }

    #[test]
    fn project_examples() {
        let p = simple(1.0, 0.0).project(&[0.0, 0.0, 5.0]);
        // (0,0) is inside [0,64)².
        assert_eq!(p, Some(Projection { u: 0.0, v: 0.0, depth: 5.0 }));
        let p = simple(2.0, 10.0).project(&[1.0, 1.0, 2.0]).unwrap();
        assert_eq!((p.u, p.v, p.depth), (11.0, 11.0, 2.0));
        assert_eq!(simple(1.0, 0.0).project(&[0.0, 0.0, -1.0]), None);
    }

    #[test]
    fn unproject_examples() {
        let cam = simple(5.0, 32.0);
        assert_eq!(cam.unproject(32.0, 32.0, 7.0).unwrap(), [0.0, 0.0, 7.0]);
        assert_eq!(simple(1.0, 0.0).unproject(2.0, 0.0, 3.0).unwrap(), [6.0, 0.0, 3.0]);
        assert!(matches!(cam.unproject(1.0, 1.0, 0.0), Err(Error::Domain(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Pose inversion: a camera looking along +x from the origin.
        let cam = CameraParams::looking([0.0; 3], 0.0, 0.0, 1.2, 64, 64).unwrap();
        let w = cam.unproject(cam.cx, cam.cy, 3.0).unwrap();
        assert!((w[0] - 3.0).abs() < 1e-12 && w[1].abs() < 1e-12 && w[2].abs() < 1e-12);

        let cam = random_camera(&mut rng);
        let target = cam.unproject(20.0, 30.0, 7.0).unwrap();
        let p = cam.project(&target).unwrap();
        assert!((p.u - 20.0).abs() < 1e-9 && (p.v - 30.0).abs() < 1e-9 && (p.depth - 7.0).abs() < 1e-9);
    }

    #[test]
    fn roundtrip_many_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let cam = random_camera(&mut rng);
            for _ in 0..1000 {
                let u = rng.gen_range(0.0..cam.width as f64);
                let v = rng.gen_range(0.0..cam.height as f64);
                let d = rng.gen_range(0.2..50.0);
                let p = cam.unproject(u, v, d).unwrap();
                let Some(q) = cam.project(&p) else { continue };
                let back = cam.unproject(q.u, q.v, q.depth).unwrap();
                let err = sub(&p, &back).iter().map(|e| e.abs()).fold(0.0, f64::max);
                assert!(err < 1e-9, "{err}");
            }
        }
    }

    #[test]
    fn rejects_invalid_cameras() {
        assert!(CameraParams::new(0.0, 1.0, 0.0, 0.0, 4, 4, IDENTITY, [0.0; 3]).is_err());
        let reflect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(CameraParams::new(1.0, 1.0, 0.0, 0.0, 4, 4, reflect, [0.0; 3]).is_err());
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraParams::new(1.0, 1.0, 0.0, 0.0, 4, 4, skew, [0.0; 3]).is_err());
    }

    #[test]
    fn depth_bins_examples() {
        let b = DepthBins::new(1.0, 5.0, 4).unwrap();
        assert_eq!(b.depth_to_bin(2.5), Some(1));
        assert_eq!(b.depth_to_bin(1.0), Some(0));
        assert_eq!(b.depth_to_bin(5.0 - 1e-9), Some(3));
        assert_eq!(b.depth_to_bin(5.0), None);
        assert_eq!(b.depth_to_bin(0.99), None);
        assert_eq!(b.depth_to_bin(f64::NAN), None);
        assert!(DepthBins::new(0.0, 5.0, 4).is_err());
        assert!(DepthBins::new(2.0, 1.0, 4).is_err());
    }

    #[test]
    fn bev_index_examples() {
        let cfg = BevConfig::paper_scale();
        assert_eq!(cfg.bev_index(0.0, 0.0), Some((90, 90)));
        let (sx, _) = cfg.cell_size();
        assert!((sx - 0.6).abs() < 1e-12);
        assert_eq!(cfg.bev_index(cfg.x_min, 0.0).map(|c| c.0), Some(0));
        assert_eq!(cfg.bev_index(cfg.x_max, 0.0), None);
        assert_eq!(cfg.bev_index(f64::INFINITY, 0.0), None);
    }

    proptest! {
        #[test]
        fn bev_index_partitions_the_plane(x in -10.0f64..10.0, y in -10.0f64..10.0) {
            let cfg = BevConfig::default();
            let owners: Vec<(usize, usize)> = (0..cfg.n)
                .flat_map(|gx| (0..cfg.n).map(move |gy| (gx, gy)))
                .filter(|&(gx, gy)| {
                    let (sx, sy) = cfg.cell_size();
                    let x0 = cfg.x_min + gx as f64 * sx;
                    let y0 = cfg.y_min + gy as f64 * sy;
                    // Cells own [x0, x0+sx) unless floor rounding moved the edge.
                    x >= x0 - 1e-12 && x < x0 + sx - 1e-12 && y >= y0 - 1e-12 && y < y0 + sy - 1e-12
                })
                .collect();
            match cfg.bev_index(x, y) {
                Some(c) => prop_assert_eq!(owners, vec![c]),
                None => prop_assert!(owners.is_empty()),
            }
        }

        #[test]
        fn depth_bins_partition(d in 0.0f64..10.0) {
            let b = DepthBins::default();
            let hits: Vec<usize> = (0..b.count)
                .filter(|&i| {
                    let lo = b.d_min + i as f64 * b.width();
                    d >= lo && d < lo + b.width()
                })
                .collect();
            match b.depth_to_bin(d) {
                Some(i) => prop_assert_eq!(hits, vec![i]),
                None => prop_assert!(hits.is_empty()),
            }
        }
    }
}
