//! Named parameters and the layers built from graph primitives.
//!
//! Spatial feature maps are stored as `[H·W, C]` with row `y·W + x`; BEV
//! maps use the same layout with `(gx, gy)` in place of `(y, x)`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};

/// Parameters keyed by hierarchical dotted names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in self.map.values_mut() {
            t.data_mut().fill(0.0);
        }
    }

    /// Parameters whose names start with `prefix.`.
    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> + 'a {
        self.map
            .iter()
            .filter(move |(k, _)| k.strip_prefix(prefix).is_some_and(|r| r.starts_with('.')))
    }
}

/// Glorot-uniform dense layer `name.weight` `[out, in]`, plus a zero
/// `name.bias` when `bias` is set.
pub fn init_dense<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, out_dim: usize, in_dim: usize, bias: bool) {
    init_dense_scaled(ps, rng, name, out_dim, in_dim, bias, 1.0);
}

pub fn init_dense_scaled<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    out_dim: usize,
    in_dim: usize,
    bias: bool,
    gain: f64,
) {
    let limit = gain * (6.0 / (in_dim + out_dim) as f64).sqrt();
    let w = (0..out_dim * in_dim).map(|_| rng.gen_range(-limit..limit)).collect();
    ps.insert(format!("{name}.weight"), Tensor::new(vec![out_dim, in_dim], w).expect("sized"));
    if bias {
        ps.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
    }
}

/// Two dense layers with a hidden ReLU: `name.0`, `name.1`.
pub fn init_mlp<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, in_dim: usize, hidden: usize, out_dim: usize, bias: bool) {
    init_dense(ps, rng, &format!("{name}.0"), hidden, in_dim, bias);
    init_dense(ps, rng, &format!("{name}.1"), out_dim, hidden, bias);
}

/// 3×3 convolution weights stored as a dense layer over 9·in_ch inputs.
pub fn init_conv<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, out_ch: usize, in_ch: usize, bias: bool) {
    init_dense(ps, rng, name, out_ch, 9 * in_ch, bias);
}

/// Dense layer; uses `name.bias` when the set has one.
pub fn dense<G: Graph>(g: &mut G, ps: &ParamSet, name: &str, x: &G::V) -> Result<G::V> {
    let w = g.param(&format!("{name}.weight"), ps.get(&format!("{name}.weight"))?);
    let bias_name = format!("{name}.bias");
    match ps.get(&bias_name) {
        Ok(b) => {
            let b = g.param(&bias_name, b);
            g.linear(x, &w, Some(&b))
        }
        Err(_) => g.linear(x, &w, None),
    }
}

pub fn mlp<G: Graph>(g: &mut G, ps: &ParamSet, name: &str, x: &G::V) -> Result<G::V> {
    let h = dense(g, ps, &format!("{name}.0"), x)?;
    let h = g.relu(&h)?;
    dense(g, ps, &format!("{name}.1"), &h)
}

/// Spatial extent of a `[H·W, C]` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extent {
    pub h: usize,
    pub w: usize,
}

impl Extent {
    pub fn new(h: usize, w: usize) -> Self {
        Extent { h, w }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }
}

/// Row indices of 3×3 patches (padding 1) for every output pixel, in
/// `(ky, kx)` order; `None` marks zero padding.
pub fn im2col_indices(input: Extent, stride: usize) -> Result<(Extent, Vec<Option<usize>>)> {
    if stride == 0 || !input.h.is_multiple_of(stride) || !input.w.is_multiple_of(stride) {
        return Err(Error::dim(format!(
            "{}×{} map is not divisible by stride {stride}",
            input.h, input.w
        )));
    }
    let out = Extent::new(input.h / stride, input.w / stride);
    let mut idx = Vec::with_capacity(out.cells() * 9);
    for oy in 0..out.h {
        for ox in 0..out.w {
            for ky in 0..3 {
                for kx in 0..3 {
                    let y = (oy * stride + ky) as isize - 1;
                    let x = (ox * stride + kx) as isize - 1;
                    let inside = y >= 0 && x >= 0 && (y as usize) < input.h && (x as usize) < input.w;
                    idx.push(inside.then(|| y as usize * input.w + x as usize));
                }
            }
        }
    }
    Ok((out, idx))
}

/// 3×3 convolution with padding 1. Weight column `(ky·3 + kx)·C + c` reads
/// input channel `c` at offset `(ky−1, kx−1)`.
pub fn conv3x3<G: Graph>(
    g: &mut G,
    ps: &ParamSet,
    name: &str,
    x: &G::V,
    extent: Extent,
    stride: usize,
) -> Result<(G::V, Extent)> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[0] != extent.cells() {
        return Err(Error::dim(format!(
            "conv `{name}`: input {shape:?} does not match {}×{} map",
            extent.h, extent.w
        )));
    }
    let c = shape[1];
    let (out, idx) = im2col_indices(extent, stride)?;
    let patches = g.gather_rows(x, &idx)?;
    let patches = g.reshape(&patches, &[out.cells(), 9 * c])?;
    Ok((dense(g, ps, name, &patches)?, out))
}

/// Non-overlapping `s×s` transposed convolution: each input pixel emits an
/// `s×s` block through a dense layer to `s²·C_out`, then blocks are laid out
/// spatially.
pub fn upsample<G: Graph>(g: &mut G, ps: &ParamSet, name: &str, x: &G::V, extent: Extent, s: usize) -> Result<(G::V, Extent)> {
    let blocks = dense(g, ps, name, x)?;
    let width = g.shape(&blocks)[1];
    if width % (s * s) != 0 {
        return Err(Error::dim(format!("upsample `{name}`: {width} outputs not divisible by {s}²")));
    }
    let c_out = width / (s * s);
    let sub = g.reshape(&blocks, &[extent.cells() * s * s, c_out])?;
    let out = Extent::new(extent.h * s, extent.w * s);
    let mut idx = Vec::with_capacity(out.cells());
    for y in 0..out.h {
        for x in 0..out.w {
            let src = (y / s) * extent.w + x / s;
            idx.push(Some(src * s * s + (y % s) * s + x % s));
        }
    }
    Ok((g.gather_rows(&sub, &idx)?, out))
}

/// Scaled dot-product attention; returns the output and the weights.
pub fn attention<G: Graph>(g: &mut G, q: &G::V, k: &G::V, v: &G::V) -> Result<(G::V, G::V)> {
    let d = g.shape(q)[1] as f64;
    let logits = g.linear(q, k, None)?;
    let logits = g.scale(&logits, 1.0 / d.sqrt())?;
    let weights = g.softmax(&logits, 1)?;
    let vt = g.transpose(v)?;
    let out = g.linear(&weights, &vt, None)?;
    Ok((out, weights))
}

/// Repeats a `[1, C]` row `rows` times.
pub fn tile_row<G: Graph>(g: &mut G, row: &G::V, rows: usize) -> Result<G::V> {
    g.gather_rows(row, &vec![Some(0); rows])
}

/// Sinusoidal encoding of a 2D grid position into `dim` channels: the first
/// half encodes `a`, the second `b`, each as interleaved sin/cos pairs.
pub fn position_encoding(a: usize, b: usize, n: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for (offset, coord) in [(0, a), (half, b)] {
        let pos = coord as f64 / n.max(1) as f64 * 2.0 * std::f64::consts::PI;
        for i in 0..half / 2 {
            let freq = (1 << i) as f64;
            out[offset + 2 * i] = (pos * freq).sin();
            out[offset + 2 * i + 1] = (pos * freq).cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{finite_diff_check, Eager, Tape, DEFAULT_EPS};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct 3×3 convolution, padding 1.
    fn naive_conv(x: &Tensor, e: Extent, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Tensor {
        let c = x.shape()[1];
        let co = w.shape()[0];
        let (oh, ow) = (e.h / stride, e.w / stride);
        let mut out = Tensor::zeros(&[oh * ow, co]);
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let y = (oy * stride + ky) as isize - 1;
                            let xx = (ox * stride + kx) as isize - 1;
                            if y < 0 || xx < 0 || y >= e.h as isize || xx >= e.w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                acc += x.get(&[y as usize * e.w + xx as usize, ci])
                                    * w.get(&[o, (ky * 3 + kx) * c + ci]);
                            }
                        }
                    }
                    out.set(&[oy * ow + ox, o], acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let mut ps = ParamSet::new();
            init_conv(&mut ps, &mut rng, "c", 5, 3, true);
            ps.insert("c.bias", rand_tensor(&mut rng, &[5]));
            let e = Extent::new(6, 8);
            let x = rand_tensor(&mut rng, &[48, 3]);
            let (y, oe) = conv3x3(&mut Eager, &ps, "c", &x, e, stride).unwrap();
            assert_eq!(oe, Extent::new(6 / stride, 8 / stride));
            let want = naive_conv(&x, e, ps.get("c.weight").unwrap(), Some(ps.get("c.bias").unwrap()), stride);
            assert!(y.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_indivisible_input() {
        let (_, idx) = im2col_indices(Extent::new(4, 4), 2).unwrap();
        assert_eq!(idx.len(), 4 * 9);
        assert!(im2col_indices(Extent::new(5, 4), 2).unwrap_err().is_shape_error());
    }

    #[test]
    fn upsample_matches_transposed_conv_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, ci, co) = (2, 3, 2);
        let mut ps = ParamSet::new();
        init_dense(&mut ps, &mut rng, "up", s * s * co, ci, false);
        let e = Extent::new(3, 4);
        let x = rand_tensor(&mut rng, &[12, ci]);
        let (y, oe) = upsample(&mut Eager, &ps, "up", &x, e, s).unwrap();
        assert_eq!(oe, Extent::new(6, 8));
        let w = ps.get("up.weight").unwrap();
        // Stride-s transposed convolution with an s×s kernel, written as a
        // scatter from each input pixel.
        let mut want = Tensor::zeros(&[48, co]);
        for iy in 0..e.h {
            for ix in 0..e.w {
                for dy in 0..s {
                    for dx in 0..s {
                        for o in 0..co {
                            let mut acc = 0.0;
                            for c in 0..ci {
                                acc += x.get(&[iy * e.w + ix, c]) * w.get(&[(dy * s + dx) * co + o, c]);
                            }
                            let row = (iy * s + dy) * oe.w + ix * s + dx;
                            want.set(&[row, o], want.get(&[row, o]) + acc);
                        }
                    }
                }
            }
        }
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn conv_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        init_conv(&mut ps, &mut rng, "c", 2, 2, true);
        let x = rand_tensor(&mut rng, &[16, 2]);
        let e = Extent::new(4, 4);
        let err = finite_diff_check(
            |t: &mut Tape, v| {
                let (y, _) = conv3x3(t, &ps, "c", &v, e, 2)?;
                let y = t.sigmoid(&y)?;
                t.sum(&y)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_tensor(&mut rng, &[3, 4]);
        let k = rand_tensor(&mut rng, &[7, 4]);
        let v = rand_tensor(&mut rng, &[7, 5]);
        let (out, w) = attention(&mut Eager, &q, &k, &v).unwrap();
        assert_eq!(out.shape(), &[3, 5]);
        for r in 0..3 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn param_groups_match_prefix_exactly() {
        let mut ps = ParamSet::new();
        ps.insert("head.a", Tensor::scalar(1.0));
        ps.insert("header.b", Tensor::scalar(1.0));
        ps.insert("head.c.d", Tensor::scalar(1.0));
        let names: Vec<_> = ps.group("head").map(|(k, _)| k.clone()).collect();
        assert_eq!(names, vec!["head.a", "head.c.d"]);
        assert!(ps.get("nope").is_err());
    }

    #[test]
    fn position_encoding_is_bounded_and_distinct() {
        let a = position_encoding(1, 2, 16, 8);
        let b = position_encoding(2, 1, 16, 8);
        assert_ne!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }
}
