//! Forward kernels shared by eager evaluation and the tape.
//!
//! Every kernel is a pure function of its inputs. Reductions run in a fixed
//! index order; the parallel paths split only over independent output rows,
//! so results are bit-identical for any thread count.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Output elements below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

/// Probability clamp applied before any logarithm in the fused losses.
pub const PROB_EPS: f64 = 1e-7;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn for_each_row(out: &mut [f64], width: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    if width == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(r, row)| f(r, row));
    } else {
        out.chunks_mut(width)
            .enumerate()
            .for_each(|(r, row)| f(r, row));
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `y[.., o] = Σ_i x[.., i]·w[o, i] + b[o]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::dim(format!("linear: weight must be rank 2, got {:?}", w.shape())));
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != in_dim {
        return Err(Error::dim(format!(
            "linear: input last extent {} != weight in-dim {in_dim}",
            x.last_dim()
        )));
    }
    if let Some(b) = b {
        if b.shape() != [out_dim] {
            return Err(Error::dim(format!(
                "linear: bias shape {:?} != [{out_dim}]",
                b.shape()
            )));
        }
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * out_dim];
    let (xd, wd) = (x.data(), w.data());
    for_each_row(&mut out, out_dim, rows * out_dim * in_dim, |r, yr| {
        let xr = &xd[r * in_dim..(r + 1) * in_dim];
        for (o, y) in yr.iter_mut().enumerate() {
            *y = dot(xr, &wd[o * in_dim..(o + 1) * in_dim]);
        }
        if let Some(b) = b {
            for (y, bo) in yr.iter_mut().zip(b.data()) {
                *y += bo;
            }
        }
    });
    let mut shape = x.shape().to_vec();
    if shape.is_empty() {
        shape.push(out_dim);
    } else {
        *shape.last_mut().unwrap() = out_dim;
    }
    Tensor::new(shape, out)?.check_finite("linear")
}

/// Gradient of `linear` w.r.t. its input.
pub(crate) fn linear_grad_input(dy: &Tensor, w: &Tensor, x_shape: &[usize]) -> Tensor {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let rows = dy.rows();
    let mut dx = vec![0.0; rows * in_dim];
    let (dyd, wd) = (dy.data(), w.data());
    for_each_row(&mut dx, in_dim, rows * out_dim * in_dim, |r, dxr| {
        for o in 0..out_dim {
            let g = dyd[r * out_dim + o];
            if g != 0.0 {
                axpy(g, &wd[o * in_dim..(o + 1) * in_dim], dxr);
            }
        }
    });
    Tensor::new(x_shape.to_vec(), dx).expect("linear input grad shape")
}

/// Gradient of `linear` w.r.t. its weight.
pub(crate) fn linear_grad_weight(dy: &Tensor, x: &Tensor, out_dim: usize) -> Tensor {
    let in_dim = x.last_dim();
    let rows = x.rows();
    let mut dw = vec![0.0; out_dim * in_dim];
    let (dyd, xd) = (dy.data(), x.data());
    for_each_row(&mut dw, in_dim, rows * out_dim * in_dim, |o, dwo| {
        for r in 0..rows {
            let g = dyd[r * out_dim + o];
            if g != 0.0 {
                axpy(g, &xd[r * in_dim..(r + 1) * in_dim], dwo);
            }
        }
    });
    Tensor::new(vec![out_dim, in_dim], dw).expect("linear weight grad shape")
}

pub(crate) fn linear_grad_bias(dy: &Tensor, out_dim: usize) -> Tensor {
    let mut db = vec![0.0; out_dim];
    for row in dy.data().chunks(out_dim) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Tensor::vector(db)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::dim(format!("transpose needs rank 2, got {:?}", a.shape())));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)?.check_finite("add")
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)?.check_finite("mul")
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    a.map(|v| v * c).check_finite("scale")
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat of zero tensors"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::dim(format!("concat axis {axis} out of range for rank {rank}")));
    }
    for p in parts {
        if p.rank() != rank
            || p.shape()[..axis] != first.shape()[..axis]
            || p.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(Error::dim(format!(
                "concat: shape {:?} incompatible with {:?} on axis {axis}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let blocks: Vec<usize> = parts
        .iter()
        .map(|p| p.shape()[axis..].iter().product())
        .collect();
    let total: usize = blocks.iter().sum();
    let mut out = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (p, &blk) in parts.iter().zip(&blocks) {
            out.extend_from_slice(&p.data()[o * blk..(o + 1) * blk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    Tensor::new(shape, out)
}

/// Splits the gradient of a concat back into per-part gradients.
pub(crate) fn concat_grad(dy: &Tensor, shapes: &[Vec<usize>], axis: usize) -> Vec<Tensor> {
    let outer: usize = shapes[0][..axis].iter().product();
    let blocks: Vec<usize> = shapes.iter().map(|s| s[axis..].iter().product()).collect();
    let total: usize = blocks.iter().sum();
    let mut grads: Vec<Vec<f64>> = blocks.iter().map(|b| Vec::with_capacity(outer * b)).collect();
    for o in 0..outer {
        let mut off = o * total;
        for (g, &blk) in grads.iter_mut().zip(&blocks) {
            g.extend_from_slice(&dy.data()[off..off + blk]);
            off += blk;
        }
    }
    grads
        .into_iter()
        .zip(shapes)
        .map(|(g, s)| Tensor::new(s.clone(), g).expect("concat grad shape"))
        .collect()
}

fn row_width(a: &Tensor) -> usize {
    a.shape()[1..].iter().product()
}

/// Selects leading-axis rows; `None` yields a zero row.
pub fn gather_rows(a: &Tensor, idx: &[Option<usize>]) -> Result<Tensor> {
    if a.rank() == 0 {
        return Err(Error::dim("gather_rows on rank-0 tensor"));
    }
    let (n, w) = (a.outer(), row_width(a));
    let mut out = vec![0.0; idx.len() * w];
    for (k, i) in idx.iter().enumerate() {
        if let Some(i) = *i {
            if i >= n {
                return Err(Error::dim(format!("gather_rows: index {i} >= {n} rows")));
            }
            out[k * w..(k + 1) * w].copy_from_slice(&a.data()[i * w..(i + 1) * w]);
        }
    }
    let mut shape = a.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, out)
}

/// Adds row `k` of `a` (times `weights[k]`) into output row `idx[k]`;
/// `None` entries are dropped.
pub fn scatter_add_rows(
    a: &Tensor,
    idx: &[Option<usize>],
    weights: Option<&[f64]>,
    out_rows: usize,
) -> Result<Tensor> {
    if a.rank() == 0 || a.outer() != idx.len() {
        return Err(Error::dim(format!(
            "scatter_add_rows: {} indices for shape {:?}",
            idx.len(),
            a.shape()
        )));
    }
    if weights.is_some_and(|w| w.len() != idx.len()) {
        return Err(Error::dim("scatter_add_rows: weight count mismatch"));
    }
    let w = row_width(a);
    let mut out = vec![0.0; out_rows * w];
    for (k, i) in idx.iter().enumerate() {
        if let Some(i) = *i {
            if i >= out_rows {
                return Err(Error::dim(format!("scatter_add_rows: index {i} >= {out_rows}")));
            }
            let s = weights.map_or(1.0, |ws| ws[k]);
            axpy(s, &a.data()[k * w..(k + 1) * w], &mut out[i * w..(i + 1) * w]);
        }
    }
    let mut shape = a.shape().to_vec();
    shape[0] = out_rows;
    Tensor::new(shape, out)?.check_finite("scatter_add_rows")
}

/// Numerically stable softmax along `axis`.
pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(Error::dim(format!("softmax axis {axis} out of range for {:?}", a.shape())));
    }
    let (outer, len, inner) = split_axis(a.shape(), axis);
    let d = a.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let m = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..len {
                let e = (d[at(k)] - m).exp();
                out[at(k)] = e;
                s += e;
            }
            for k in 0..len {
                out[at(k)] /= s;
            }
        }
    }
    Tensor::new(a.shape().to_vec(), out)?.check_finite("softmax")
}

pub(crate) fn softmax_grad(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let s: f64 = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..len {
                dx[at(k)] = yd[at(k)] * (gd[at(k)] - s);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("softmax grad shape")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| v.max(0.0))
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    if a.is_empty() {
        return Err(Error::dim("mean of an empty tensor"));
    }
    Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64))
}

/// Frustum scatter: output cell `cells[p·D + d]` accumulates
/// `context[p, :]·probs[p, d]`. Cells marked `None` drop their mass.
pub fn bev_pool(
    context: &Tensor,
    probs: &Tensor,
    cells: &[Option<usize>],
    n_cells: usize,
) -> Result<Tensor> {
    let (p, c) = (context.rows(), context.last_dim());
    let d = probs.last_dim();
    if probs.rows() != p || cells.len() != p * d {
        return Err(Error::dim(format!(
            "bev_pool: context {:?}, probs {:?}, {} cells",
            context.shape(),
            probs.shape(),
            cells.len()
        )));
    }
    let mut out = vec![0.0; n_cells * c];
    for pix in 0..p {
        let f = &context.data()[pix * c..(pix + 1) * c];
        for bin in 0..d {
            if let Some(cell) = cells[pix * d + bin] {
                if cell >= n_cells {
                    return Err(Error::dim(format!("bev_pool: cell {cell} >= {n_cells}")));
                }
                let w = probs.data()[pix * d + bin];
                axpy(w, f, &mut out[cell * c..(cell + 1) * c]);
            }
        }
    }
    Tensor::new(vec![n_cells, c], out)?.check_finite("bev_pool")
}

pub(crate) fn bev_pool_grad(
    context: &Tensor,
    probs: &Tensor,
    cells: &[Option<usize>],
    dy: &Tensor,
) -> (Tensor, Tensor) {
    let (p, c) = (context.rows(), context.last_dim());
    let d = probs.last_dim();
    let mut dctx = vec![0.0; p * c];
    let mut dprob = vec![0.0; p * d];
    for pix in 0..p {
        let f = &context.data()[pix * c..(pix + 1) * c];
        for bin in 0..d {
            if let Some(cell) = cells[pix * d + bin] {
                let g = &dy.data()[cell * c..(cell + 1) * c];
                dprob[pix * d + bin] = dot(f, g);
                axpy(probs.data()[pix * d + bin], g, &mut dctx[pix * c..(pix + 1) * c]);
            }
        }
    }
    (
        Tensor::new(context.shape().to_vec(), dctx).expect("bev_pool ctx grad"),
        Tensor::new(probs.shape().to_vec(), dprob).expect("bev_pool prob grad"),
    )
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_loss_inputs(op: &str, p: &Tensor, t: &Tensor, w: &Tensor) -> Result<()> {
    same_shape(op, p, t)?;
    same_shape(op, p, w)
}

/// `Σ w·[−t ln p − (1−t) ln(1−p)]` with `p` clamped into `[1e-7, 1−1e-7]`.
pub fn bce(p: &Tensor, t: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_loss_inputs("bce", p, t, w)?;
    let mut s = 0.0;
    for ((&pi, &ti), &wi) in p.data().iter().zip(t.data()).zip(w.data()) {
        if wi == 0.0 {
            continue;
        }
        let q = clamp_prob(pi);
        s += wi * (-ti * q.ln() - (1.0 - ti) * (1.0 - q).ln());
    }
    Tensor::scalar(s).check_finite("bce")
}

pub(crate) fn bce_grad(p: &Tensor, t: &Tensor, w: &Tensor, g: f64) -> Tensor {
    let data = p
        .data()
        .iter()
        .zip(t.data())
        .zip(w.data())
        .map(|((&pi, &ti), &wi)| {
            if wi == 0.0 || pi <= PROB_EPS || pi >= 1.0 - PROB_EPS {
                0.0
            } else {
                g * wi * (-ti / pi + (1.0 - ti) / (1.0 - pi))
            }
        })
        .collect();
    Tensor::new(p.shape().to_vec(), data).expect("bce grad shape")
}

/// Binary focal loss term for one probability and a {0,1} target.
pub fn focal_scalar(p: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    let q = clamp_prob(p);
    if target >= 0.5 {
        -alpha * (1.0 - q).powf(gamma) * q.ln()
    } else {
        -(1.0 - alpha) * q.powf(gamma) * (1.0 - q).ln()
    }
}

fn focal_scalar_grad(p: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        return 0.0;
    }
    if target >= 0.5 {
        let om = 1.0 - p;
        let pow_m1 = if gamma == 0.0 { 0.0 } else { gamma * om.powf(gamma - 1.0) };
        alpha * (pow_m1 * p.ln() - om.powf(gamma) / p)
    } else {
        let pow_m1 = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
        -(1.0 - alpha) * (pow_m1 * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p))
    }
}

/// `Σ w·focal(p, t)`; targets are read as binary (`t ≥ 0.5` is positive).
pub fn focal(p: &Tensor, t: &Tensor, w: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    check_loss_inputs("focal", p, t, w)?;
    let s: f64 = p
        .data()
        .iter()
        .zip(t.data())
        .zip(w.data())
        .filter(|(_, wi)| **wi != 0.0)
        .map(|((&pi, &ti), &wi)| wi * focal_scalar(pi, ti, alpha, gamma))
        .sum();
    Tensor::scalar(s).check_finite("focal")
}

pub(crate) fn focal_grad(p: &Tensor, t: &Tensor, w: &Tensor, alpha: f64, gamma: f64, g: f64) -> Tensor {
    let data = p
        .data()
        .iter()
        .zip(t.data())
        .zip(w.data())
        .map(|((&pi, &ti), &wi)| {
            if wi == 0.0 {
                0.0
            } else {
                g * wi * focal_scalar_grad(pi, ti, alpha, gamma)
            }
        })
        .collect();
    Tensor::new(p.shape().to_vec(), data).expect("focal grad shape")
}

/// `Σ w·|a − b|`.
pub fn l1(a: &Tensor, b: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_loss_inputs("l1", a, b, w)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .zip(w.data())
        .map(|((x, y), wi)| wi * (x - y).abs())
        .sum();
    Tensor::scalar(s).check_finite("l1")
}

pub(crate) fn l1_grad(a: &Tensor, b: &Tensor, w: &Tensor, g: f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(w.data())
        .map(|((x, y), wi)| {
            let d = x - y;
            if d > 0.0 {
                g * wi
            } else if d < 0.0 {
                -g * wi
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("l1 grad shape")
}
