//! Seeded inputs shared by the benchmarks.

use bevkit_core::geometry::{BevConfig, DepthBins};
use bevkit_core::hungarian::CostMatrix;
use bevkit_core::model::{ModelConfig, SceneInput};
use bevkit_core::nn::Extent;
use bevkit_core::numerics::ops;
use bevkit_core::scene::generate_scene;
use bevkit_core::view::frustum_cells;
use bevkit_core::{CameraParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Context features, depth distributions and frustum cells for one camera.
pub struct RayInputs {
    pub bev: BevConfig,
    pub context: Tensor,
    pub probs: Tensor,
    pub cells: Vec<Option<usize>>,
}

pub fn ray_inputs(extent: Extent, bins: DepthBins, channels: usize) -> RayInputs {
    let bev = BevConfig::default();
    let cam = CameraParams::looking([0.0, 0.0, 1.0], 0.2, 0.25, 1.2, extent.w * 2, extent.h * 2).expect("valid camera");
    let cells = frustum_cells(&cam, &bins, &bev, extent, 2);
    let probs = ops::softmax(&random_tensor(2, &[extent.cells(), bins.count]), 1).expect("rank 2");
    RayInputs { bev, context: random_tensor(1, &[extent.cells(), channels]), probs, cells }
}

/// A prepared desk-scale scene.
pub fn desk_scene(seed: u64) -> (ModelConfig, SceneInput) {
    let cfg = ModelConfig::desk();
    let scene = generate_scene(6, &cfg.bev, cfg.classes, seed).expect("scene");
    let input = SceneInput::prepare(&scene, &cfg).expect("prepared");
    (cfg, input)
}

pub fn cost_matrix(seed: u64, rows: usize, cols: usize) -> CostMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CostMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(0.0..10.0)).collect()).expect("shape")
}

/// Heatmap in `(0, 1)` over an `n × n` grid.
pub fn heatmap(seed: u64, n: usize, classes: usize) -> Tensor {
    random_tensor(seed, &[n * n, classes]).map(|v| 0.5 + 0.49 * v)
}
