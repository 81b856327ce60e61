//! Camera features to BEV through two streams.
//!
//! The ray stream predicts a depth distribution per low-resolution pixel and
//! scatters the pixel's context feature along its viewing ray, one depth-bin
//! center at a time. The point stream reads high-resolution pixel features
//! at LiDAR returns and averages them per BEV cell. Both land in the same
//! `[n², C]` layout and are fused by a small convolutional encoder.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{BevConfig, CameraParams, DepthBins, CALIBRATION_DIM};
use crate::nn::{conv3x3, dense, mlp, tile_row, upsample, Extent, ParamSet};
use crate::numerics::{Graph, Tensor};
use crate::scene::PointCloud;

/// Bias-free strided conv, ReLU, conv: `[H·W, C_img] → [H/s·W/s, C_f]`.
pub fn camera_encode<G: Graph>(g: &mut G, ps: &ParamSet, image: &G::V, extent: Extent, stride: usize) -> Result<(G::V, Extent)> {
    let (h, lr) = conv3x3(g, ps, "camera.enc0", image, extent, stride)?;
    let h = g.relu(&h)?;
    conv3x3(g, ps, "camera.enc1", &h, lr, 1)
}

/// Learned `s×` upsampling back to image resolution with `C_hr` channels.
pub fn upsample_hr<G: Graph>(g: &mut G, ps: &ParamSet, lr: &G::V, extent: Extent, stride: usize) -> Result<(G::V, Extent)> {
    upsample(g, ps, "camera.up", lr, extent, stride)
}

/// Image coordinates of the center of low-resolution pixel `(x, y)`.
pub fn feature_pixel_center(x: usize, y: usize, stride: usize) -> (f64, f64) {
    (stride as f64 * (x as f64 + 0.5), stride as f64 * (y as f64 + 0.5))
}

/// Normalized ray slopes `((u−cx)/fx, (v−cy)/fy)` per low-resolution pixel.
pub fn ray_slopes(cam: &CameraParams, extent: Extent, stride: usize) -> Tensor {
    let mut data = Vec::with_capacity(extent.cells() * 2);
    for y in 0..extent.h {
        for x in 0..extent.w {
            let (u, v) = feature_pixel_center(x, y, stride);
            data.push((u - cam.cx) / cam.fx);
            data.push((v - cam.cy) / cam.fy);
        }
    }
    Tensor::new(vec![extent.cells(), 2], data).expect("sized")
}

/// Context features `F_t [P, C_t]` and depth distribution `D_p [P, D]`.
///
/// Each pixel sees its LR feature, its ray slopes, and an embedding of the
/// camera calibration shared by all pixels of that camera.
pub fn depth_net<G: Graph>(
    g: &mut G,
    ps: &ParamSet,
    lr: &G::V,
    extent: Extent,
    cam: &CameraParams,
    stride: usize,
) -> Result<(G::V, G::V)> {
    let calib = Tensor::new(vec![1, CALIBRATION_DIM], cam.calibration_vector())?;
    let calib = g.constant(calib);
    let emb = dense(g, ps, "depth.cam_embed", &calib)?;
    let emb = g.relu(&emb)?;
    let emb = tile_row(g, &emb, extent.cells())?;
    let slopes = g.constant(ray_slopes(cam, extent, stride));
    let x = g.concat(&[lr.clone(), slopes, emb], 1)?;
    let context = dense(g, ps, "depth.context", &x)?;
    let logits = mlp(g, ps, "depth.head", &x)?;
    let probs = g.softmax(&logits, 1)?;
    Ok((context, probs))
}

/// One-hot depth targets per low-resolution pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthGroundTruth {
    /// `[P, D]`, one-hot on valid rows, zero elsewhere.
    pub onehot: Tensor,
    /// `[P]`, 1 for valid pixels.
    pub mask: Tensor,
}

impl DepthGroundTruth {
    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.0).count()
    }
}

/// Projects every point, keeps the nearest depth per low-resolution pixel,
/// and one-hot encodes its bin. Pixels whose nearest depth falls outside the
/// bins stay invalid.
pub fn depth_ground_truth(pc: &PointCloud, cam: &CameraParams, bins: &DepthBins, stride: usize) -> Result<DepthGroundTruth> {
    if stride == 0 || !cam.width.is_multiple_of(stride) || !cam.height.is_multiple_of(stride) {
        return Err(Error::dim(format!(
            "{}×{} image is not divisible by stride {stride}",
            cam.height, cam.width
        )));
    }
    let (h, w) = (cam.height / stride, cam.width / stride);
    let mut nearest = vec![f64::INFINITY; h * w];
    for i in 0..pc.len() {
        if let Some(p) = cam.project(&pc.xyz(i)) {
            let x = (p.u / stride as f64).floor() as usize;
            let y = (p.v / stride as f64).floor() as usize;
            let slot = &mut nearest[y * w + x];
            if p.depth < *slot {
                *slot = p.depth;
            }
        }
    }
    let d = bins.count;
    let mut onehot = Tensor::zeros(&[h * w, d]);
    let mut mask = Tensor::zeros(&[h * w]);
    for (pix, &depth) in nearest.iter().enumerate() {
        if let Some(bin) = bins.depth_to_bin(depth) {
            onehot.data_mut()[pix * d + bin] = 1.0;
            mask.data_mut()[pix] = 1.0;
        }
    }
    Ok(DepthGroundTruth { onehot, mask })
}

/// Bin-wise BCE summed over bins and averaged over valid pixels.
pub fn depth_loss<G: Graph>(g: &mut G, probs: &G::V, gt: &DepthGroundTruth) -> Result<G::V> {
    let shape = g.shape(probs);
    if shape != gt.onehot.shape() {
        return Err(Error::dim(format!(
            "depth loss: prediction {shape:?} vs target {:?}",
            gt.onehot.shape()
        )));
    }
    let d = shape[1];
    let norm = gt.valid_count().max(1) as f64;
    let mut weight = Tensor::zeros(&shape);
    for (row, &m) in gt.mask.data().iter().enumerate() {
        weight.data_mut()[row * d..(row + 1) * d].fill(m / norm);
    }
    g.bce(probs, &gt.onehot, &weight)
}

/// BEV cell of every `(pixel, bin)` pair, `cells[p·D + d]`, found by
/// unprojecting the bin center along the pixel ray.
pub fn frustum_cells(cam: &CameraParams, bins: &DepthBins, bev: &BevConfig, extent: Extent, stride: usize) -> Vec<Option<usize>> {
    let mut cells = Vec::with_capacity(extent.cells() * bins.count);
    for y in 0..extent.h {
        for x in 0..extent.w {
            let (u, v) = feature_pixel_center(x, y, stride);
            for d in 0..bins.count {
                let p = cam
                    .unproject(u, v, bins.center(d))
                    .expect("bin centers are positive");
                cells.push(bev.flat_index(p[0], p[1]));
            }
        }
    }
    cells
}

/// Scatters `F_t·D_p` into BEV cells: `[n², C_t]`.
pub fn ray_stream<G: Graph>(g: &mut G, context: &G::V, probs: &G::V, cells: &[Option<usize>], bev: &BevConfig) -> Result<G::V> {
    g.bev_pool(context, probs, cells, bev.cells())
}

/// Point indices per BEV cell; points outside the grid are left out.
pub fn bin_partition(pc: &PointCloud, bev: &BevConfig) -> BTreeMap<usize, Vec<usize>> {
    let mut bins: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in pc.points.iter().enumerate() {
        if let Some(c) = bev.flat_index(p[0], p[1]) {
            bins.entry(c).or_default().push(i);
        }
    }
    bins
}

/// Precomputed gather/scatter indices for the point stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointPlan {
    /// Per camera: `(HR pixel row, BEV cell, weight)` for every visible
    /// `(point, camera)` pair.
    pub per_camera: Vec<Vec<(usize, usize, f64)>>,
}

impl PointPlan {
    /// Distinct BEV cells written.
    pub fn cells(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.per_camera.iter().flatten().map(|e| e.1).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Weights each visible `(point, camera)` pair by
/// `1 / (views of the point · valid points in its bin)`, so the scatter
/// yields the per-bin mean of per-point camera averages.
pub fn plan_point_stream(pc: &PointCloud, cams: &[CameraParams], bev: &BevConfig) -> PointPlan {
    let mut views: Vec<Vec<(usize, usize)>> = vec![Vec::new(); pc.len()];
    for (c, cam) in cams.iter().enumerate() {
        for (i, v) in views.iter_mut().enumerate() {
            if let Some(p) = cam.project(&pc.xyz(i)) {
                let (x, y) = p.pixel();
                v.push((c, y * cam.width + x));
            }
        }
    }
    let mut per_camera = vec![Vec::new(); cams.len()];
    for (_, members) in bin_partition(pc, bev) {
        let valid: Vec<usize> = members.into_iter().filter(|&i| !views[i].is_empty()).collect();
        for &i in &valid {
            let cell = bev.flat_index(pc.points[i][0], pc.points[i][1]).expect("binned");
            let w = 1.0 / (views[i].len() * valid.len()) as f64;
            for &(c, pix) in &views[i] {
                per_camera[c].push((pix, cell, w));
            }
        }
    }
    PointPlan { per_camera }
}

/// Gathers HR features at LiDAR returns and averages them per BEV cell:
/// `[n², C_hr]`.
pub fn point_stream<G: Graph>(g: &mut G, hr: &[G::V], plan: &PointPlan, bev: &BevConfig) -> Result<G::V> {
    if hr.len() != plan.per_camera.len() {
        return Err(Error::dim(format!(
            "point stream: {} feature maps for {} cameras",
            hr.len(),
            plan.per_camera.len()
        )));
    }
    let c_hr = hr.first().map(|v| g.shape(v)[1]).unwrap_or(0);
    let mut out = g.constant(Tensor::zeros(&[bev.cells(), c_hr]));
    for (feat, pairs) in hr.iter().zip(&plan.per_camera) {
        if pairs.is_empty() {
            continue;
        }
        let rows: Vec<Option<usize>> = pairs.iter().map(|e| Some(e.0)).collect();
        let cells: Vec<Option<usize>> = pairs.iter().map(|e| Some(e.1)).collect();
        let weights: Vec<f64> = pairs.iter().map(|e| e.2).collect();
        let picked = g.gather_rows(feat, &rows)?;
        let spread = g.scatter_add_rows(&picked, &cells, Some(&weights), bev.cells())?;
        out = g.add(&out, &spread)?;
    }
    Ok(out)
}

/// Channel concat of the two streams, then bias-free conv, ReLU, conv.
pub fn fuse_camera_bev<G: Graph>(g: &mut G, ps: &ParamSet, ray: &G::V, point: &G::V, bev: &BevConfig) -> Result<G::V> {
    let (a, b) = (g.shape(ray), g.shape(point));
    if a.len() != 2 || b.len() != 2 || a[0] != b[0] || a[0] != bev.cells() {
        return Err(Error::dim(format!("fuse: ray BEV {a:?} vs point BEV {b:?}")));
    }
    let e = Extent::new(bev.n, bev.n);
    let x = g.concat(&[ray.clone(), point.clone()], 1)?;
    let (h, _) = conv3x3(g, ps, "fuse.cam0", &x, e, 1)?;
    let h = g.relu(&h)?;
    Ok(conv3x3(g, ps, "fuse.cam1", &h, e, 1)?.0)
}
