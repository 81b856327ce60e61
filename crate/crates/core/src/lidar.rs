//! Point cloud to LiDAR BEV: voxel averaging, a shared per-voxel perceptron,
//! and a height-collapsing projection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BevConfig;
use crate::nn::{dense, mlp, ParamSet};
use crate::numerics::{Graph, Tensor};
use crate::scene::PointCloud;

pub const POINT_DIM: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelConfig {
    pub size: [f64; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Upper bound on `X·Y·Z` for dense materialization.
    #[serde(default = "default_max_voxels")]
    pub max_voxels: usize,
}

fn default_max_voxels() -> usize {
    1 << 22
}

impl Default for VoxelConfig {
    fn default() -> Self {
        VoxelConfig {
            size: [0.5, 0.5, 0.5],
            min: [-8.0, -8.0, -0.5],
            max: [8.0, 8.0, 2.5],
            max_voxels: default_max_voxels(),
        }
    }
}

impl VoxelConfig {
    /// 0.075 × 0.075 × 0.2 m voxels over ±54 m and `z ∈ [−5, 3)`.
    pub fn paper_scale() -> Self {
        VoxelConfig {
            size: [0.075, 0.075, 0.2],
            min: [-54.0, -54.0, -5.0],
            max: [54.0, 54.0, 3.0],
            max_voxels: default_max_voxels(),
        }
    }

    /// Voxels whose xy footprint tiles `bev` one-to-one, spanning `z_range`
    /// with `z_size` slabs.
    pub fn for_bev(bev: &BevConfig, z_range: (f64, f64), z_size: f64) -> Self {
        let (sx, sy) = bev.cell_size();
        VoxelConfig {
            size: [sx, sy, z_size],
            min: [bev.x_min, bev.y_min, z_range.0],
            max: [bev.x_max, bev.y_max, z_range.1],
            max_voxels: default_max_voxels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.size[a] > 0.0 && self.max[a] > self.min[a]) {
                return Err(Error::Domain(format!("invalid voxel config {self:?}")));
            }
        }
        Ok(())
    }

    /// Voxel counts `(X, Y, Z)`.
    pub fn counts(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (((self.max[a] - self.min[a]) / self.size[a]) - 1e-9).ceil().max(1.0) as usize;
        }
        out
    }

    pub fn index(&self, p: &[f64]) -> Option<[usize; 3]> {
        let counts = self.counts();
        let mut out = [0; 3];
        for a in 0..3 {
            if !(p[a] >= self.min[a] && p[a] < self.max[a]) {
                return None;
            }
            let i = ((p[a] - self.min[a]) / self.size[a]).floor() as usize;
            if i >= counts[a] {
                return None;
            }
            out[a] = i;
        }
        Some(out)
    }
}

/// Occupied voxels in ascending `(ix, iy, iz)` order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VoxelGrid {
    pub counts: [usize; 3],
    pub occupied: BTreeMap<[usize; 3], ([f64; POINT_DIM], usize)>,
}

impl VoxelGrid {
    pub fn total_points(&self) -> usize {
        self.occupied.values().map(|(_, c)| c).sum()
    }

    /// Flat dense row of a voxel: `(ix·Y + iy)·Z + iz`.
    pub fn flat(&self, idx: &[usize; 3]) -> usize {
        (idx[0] * self.counts[1] + idx[1]) * self.counts[2] + idx[2]
    }
}

/// Buckets points into voxels and averages each bucket. Members are summed
/// in sorted value order so the result does not depend on input order.
pub fn voxelize(pc: &PointCloud, cfg: &VoxelConfig) -> Result<VoxelGrid> {
    cfg.validate()?;
    let mut buckets: BTreeMap<[usize; 3], Vec<[f64; POINT_DIM]>> = BTreeMap::new();
    for p in &pc.points {
        if let Some(idx) = cfg.index(p) {
            buckets.entry(idx).or_default().push(*p);
        }
    }
    let occupied = buckets
        .into_iter()
        .map(|(idx, mut members)| {
            members.sort_by(|a, b| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut mean = [0.0; POINT_DIM];
            for m in &members {
                for (acc, v) in mean.iter_mut().zip(m) {
                    *acc += v;
                }
            }
            let n = members.len();
            for v in &mut mean {
                *v /= n as f64;
            }
            (idx, (mean, n))
        })
        .collect();
    Ok(VoxelGrid {
        counts: cfg.counts(),
        occupied,
    })
}

/// Per-voxel shared perceptron `lidar.voxel_mlp` applied to occupied voxels
/// and scattered into a dense `[X·Y·Z, C_m]` map.
pub fn encode_voxels<G: Graph>(g: &mut G, ps: &ParamSet, grid: &VoxelGrid, max_voxels: usize) -> Result<G::V> {
    let total: usize = grid.counts.iter().product();
    if total > max_voxels {
        return Err(Error::Domain(format!(
            "{total} voxels exceed the dense cap of {max_voxels}"
        )));
    }
    let c_m = ps.get("lidar.voxel_mlp.1.weight")?.shape()[0];
    if grid.occupied.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[total, c_m])));
    }
    let feats: Vec<f64> = grid.occupied.values().flat_map(|(f, _)| f.iter().copied()).collect();
    let rows = grid.occupied.len();
    let x = g.constant(Tensor::new(vec![rows, POINT_DIM], feats)?);
    let h = mlp(g, ps, "lidar.voxel_mlp", &x)?;
    let idx: Vec<Option<usize>> = grid.occupied.keys().map(|k| Some(grid.flat(k))).collect();
    g.scatter_add_rows(&h, &idx, None, total)
}

/// Concatenates the Z slices of each column and projects them with the
/// bias-free `lidar.compress` layer: `[X·Y·Z, C_m] → [X·Y, C_l]`.
pub fn compress_z<G: Graph>(g: &mut G, ps: &ParamSet, m: &G::V, counts: [usize; 3]) -> Result<G::V> {
    let shape = g.shape(m);
    let [x, y, z] = counts;
    if shape.len() != 2 || shape[0] != x * y * z {
        return Err(Error::dim(format!("compress_z: {shape:?} does not match {counts:?} voxels")));
    }
    let cols = g.reshape(m, &[x * y, z * shape[1]])?;
    dense(g, ps, "lidar.compress", &cols)
}

/// Full LiDAR branch. The voxel columns must coincide with the BEV cells.
pub fn lidar_bev<G: Graph>(g: &mut G, ps: &ParamSet, pc: &PointCloud, cfg: &VoxelConfig, bev: &BevConfig) -> Result<G::V> {
    let [x, y, _] = cfg.counts();
    if x != bev.n || y != bev.n {
        return Err(Error::dim(format!(
            "voxel grid {x}×{y} does not match the {}×{} BEV grid",
            bev.n, bev.n
        )));
    }
    let grid = voxelize(pc, cfg)?;
    let m = encode_voxels(g, ps, &grid, cfg.max_voxels)?;
    compress_z(g, ps, &m, grid.counts)
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{init_dense, init_mlp};
    use crate::numerics::Eager;

    fn params(rng: &mut ChaCha8Rng, cfg: &VoxelConfig, c_m: usize, c_l: usize) -> ParamSet {
        let mut ps = ParamSet::new();
        init_mlp(&mut ps, rng, "lidar.voxel_mlp", POINT_DIM, 8, c_m, true);
        ps.insert("lidar.voxel_mlp.0.bias", Tensor::full(&[8], 0.1));
        init_dense(&mut ps, rng, "lidar.compress", c_l, cfg.counts()[2] * c_m, false);
        ps
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud {
            points: (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-9.0..9.0),
                        rng.gen_range(-9.0..9.0),
                        rng.gen_range(-1.0..3.0),
                        rng.gen_range(0.0..1.0),
                        0.0,
                    ]
                })
                .collect(),
        }
    }

    #[test]
    fn voxelize_examples() {
        let cfg = VoxelConfig::default();
        let p = [-8.0, -8.0, -0.5, 1.0, 0.0];
        let g = voxelize(&PointCloud { points: vec![p] }, &cfg).unwrap();
        assert_eq!(g.occupied.get(&[0, 0, 0]), Some(&(p, 1)));

        let a = [0.1, 0.1, 0.1, 1.0, 0.0];
        let b = [0.3, 0.2, 0.2, 0.5, 0.0];
        let g = voxelize(&PointCloud { points: vec![a, b] }, &cfg).unwrap();
        let (mean, n) = g.occupied.values().next().unwrap();
        assert_eq!(*n, 2);
        for k in 0..5 {
            assert!((mean[k] - (a[k] + b[k]) / 2.0).abs() < 1e-15);
        }

        let paper = VoxelConfig::paper_scale();
        assert_eq!(paper.index(&[-54.0 + 0.1, 0.0, 0.0]).unwrap()[0], 1);
        assert_eq!(cfg.counts(), [32, 32, 6]);
    }

    #[test]
    fn voxelize_conserves_and_ignores_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = VoxelConfig::default();
        let mut pc = random_cloud(&mut rng, 2000);
        let g1 = voxelize(&pc, &cfg).unwrap();
        let in_range = pc.points.iter().filter(|p| cfg.index(&p[..]).is_some()).count();
        assert_eq!(g1.total_points(), in_range);
        pc.points.shuffle(&mut rng);
        let g2 = voxelize(&pc, &cfg).unwrap();
        assert_eq!(g1, g2);
        let ps = params(&mut rng, &cfg, 4, 6);
        let bev = BevConfig::default();
        let b1 = lidar_bev(&mut Eager, &ps, &pc, &cfg, &bev).unwrap();
        pc.points.reverse();
        let b2 = lidar_bev(&mut Eager, &ps, &pc, &cfg, &bev).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn encode_matches_per_voxel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = VoxelConfig::default();
        let ps = params(&mut rng, &cfg, 4, 6);
        let grid = voxelize(&random_cloud(&mut rng, 300), &cfg).unwrap();
        let m = encode_voxels(&mut Eager, &ps, &grid, cfg.max_voxels).unwrap();
        let w0 = ps.get("lidar.voxel_mlp.0.weight").unwrap();
        let b0 = ps.get("lidar.voxel_mlp.0.bias").unwrap();
        let w1 = ps.get("lidar.voxel_mlp.1.weight").unwrap();
        let b1 = ps.get("lidar.voxel_mlp.1.bias").unwrap();
        let [x, y, z] = grid.counts;
        for ix in 0..x {
            for iy in 0..y {
                for iz in 0..z {
                    let row = (ix * y + iy) * z + iz;
                    let want: Vec<f64> = match grid.occupied.get(&[ix, iy, iz]) {
                        None => vec![0.0; 4],
                        Some((f, _)) => {
                            let h: Vec<f64> = (0..8)
                                .map(|j| (b0.data()[j] + (0..5).map(|i| w0.get(&[j, i]) * f[i]).sum::<f64>()).max(0.0))
                                .collect();
                            (0..4)
                                .map(|o| b1.data()[o] + (0..8).map(|j| w1.get(&[o, j]) * h[j]).sum::<f64>())
                                .collect()
                        }
                    };
                    for o in 0..4 {
                        assert!((m.get(&[row, o]) - want[o]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn compress_matches_loop_and_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = VoxelConfig::default();
        let ps = params(&mut rng, &cfg, 4, 6);
        let [x, y, z] = cfg.counts();
        let m = Tensor::new(
            vec![x * y * z, 4],
            (0..x * y * z * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let b = compress_z(&mut Eager, &ps, &m, [x, y, z]).unwrap();
        let w = ps.get("lidar.compress.weight").unwrap();
        for cell in [0, 17, x * y - 1] {
            for o in 0..6 {
                let mut acc = 0.0;
                for iz in 0..z {
                    for c in 0..4 {
                        acc += m.get(&[cell * z + iz, c]) * w.get(&[o, iz * 4 + c]);
                    }
                }
                assert!((b.get(&[cell, o]) - acc).abs() < 1e-12);
            }
        }

        let zero = compress_z(&mut Eager, &ps, &Tensor::zeros(&[x * y * z, 4]), [x, y, z]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let one = PointCloud {
            points: vec![[1.2, -3.4, 0.7, 1.0, 0.0]],
        };
        let bev = BevConfig::default();
        let out = lidar_bev(&mut Eager, &ps, &one, &cfg, &bev).unwrap();
        let nonzero: Vec<usize> = (0..x * y).filter(|&r| out.row(r).iter().any(|&v| v != 0.0)).collect();
        assert_eq!(nonzero, vec![bev.flat_index(1.2, -3.4).unwrap()]);
    }

    #[test]
    fn empty_grid_encodes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = VoxelConfig::default();
        let ps = params(&mut rng, &cfg, 4, 6);
        let grid = voxelize(&PointCloud::default(), &cfg).unwrap();
        let m = encode_voxels(&mut Eager, &ps, &grid, cfg.max_voxels).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_bev_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = VoxelConfig::default();
        let ps = params(&mut rng, &cfg, 4, 6);
        let bev = BevConfig { n: 16, ..BevConfig::default() };
        let err = lidar_bev(&mut Eager, &ps, &PointCloud::default(), &cfg, &bev).unwrap_err();
        assert!(err.is_shape_error());
    }
}
