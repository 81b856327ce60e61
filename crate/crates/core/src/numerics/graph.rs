use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// The primitive operation set, evaluated either eagerly or on a [`Tape`].
///
/// Model code is written once against this trait. [`Eager`] runs it without
/// recording anything; [`Tape`] records every call for reverse-mode
/// differentiation.
///
/// [`Tape`]: super::Tape
pub trait Graph {
    type V: Clone;

    /// A value that never receives a gradient.
    fn constant(&mut self, t: Tensor) -> Self::V;
    /// A trainable leaf, identified by name in the gradient map.
    fn param(&mut self, name: &str, t: &Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;
    fn transpose(&mut self, a: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, c: f64) -> Result<Self::V>;
    fn concat(&mut self, parts: &[Self::V], axis: usize) -> Result<Self::V>;
    fn gather_rows(&mut self, a: &Self::V, idx: &[Option<usize>]) -> Result<Self::V>;
    fn scatter_add_rows(
        &mut self,
        a: &Self::V,
        idx: &[Option<usize>],
        weights: Option<&[f64]>,
        out_rows: usize,
    ) -> Result<Self::V>;
    fn softmax(&mut self, a: &Self::V, axis: usize) -> Result<Self::V>;
    fn sigmoid(&mut self, a: &Self::V) -> Result<Self::V>;
    fn relu(&mut self, a: &Self::V) -> Result<Self::V>;
    fn sum(&mut self, a: &Self::V) -> Result<Self::V>;
    fn mean(&mut self, a: &Self::V) -> Result<Self::V>;
    fn reshape(&mut self, a: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn bev_pool(
        &mut self,
        context: &Self::V,
        probs: &Self::V,
        cells: &[Option<usize>],
        n_cells: usize,
    ) -> Result<Self::V>;
    fn bce(&mut self, p: &Self::V, target: &Tensor, weight: &Tensor) -> Result<Self::V>;
    fn focal(
        &mut self,
        p: &Self::V,
        target: &Tensor,
        weight: &Tensor,
        alpha: f64,
        gamma: f64,
    ) -> Result<Self::V>;
    fn l1(&mut self, a: &Self::V, target: &Tensor, weight: &Tensor) -> Result<Self::V>;

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }
}

/// Tape-free evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type V = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, _name: &str, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        ops::linear(x, w, b)
    }

    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        ops::transpose(a)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::add(a, b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::mul(a, b)
    }

    fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        ops::scale(a, c)
    }

    fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        ops::concat(&refs, axis)
    }

    fn gather_rows(&mut self, a: &Tensor, idx: &[Option<usize>]) -> Result<Tensor> {
        ops::gather_rows(a, idx)
    }

    fn scatter_add_rows(
        &mut self,
        a: &Tensor,
        idx: &[Option<usize>],
        weights: Option<&[f64]>,
        out_rows: usize,
    ) -> Result<Tensor> {
        ops::scatter_add_rows(a, idx, weights, out_rows)
    }

    fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        ops::softmax(a, axis)
    }

    fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(ops::sigmoid(a))
    }

    fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(ops::relu(a))
    }

    fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        ops::sum(a).check_finite("sum")
    }

    fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        ops::mean(a)
    }

    fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        a.clone().reshaped(shape)
    }

    fn bev_pool(
        &mut self,
        context: &Tensor,
        probs: &Tensor,
        cells: &[Option<usize>],
        n_cells: usize,
    ) -> Result<Tensor> {
        ops::bev_pool(context, probs, cells, n_cells)
    }

    fn bce(&mut self, p: &Tensor, target: &Tensor, weight: &Tensor) -> Result<Tensor> {
        ops::bce(p, target, weight)
    }

    fn focal(
        &mut self,
        p: &Tensor,
        target: &Tensor,
        weight: &Tensor,
        alpha: f64,
        gamma: f64,
    ) -> Result<Tensor> {
        ops::focal(p, target, weight, alpha, gamma)
    }

    fn l1(&mut self, a: &Tensor, target: &Tensor, weight: &Tensor) -> Result<Tensor> {
        ops::l1(a, target, weight)
    }
}

/// Weight and bias of a dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::dim(format!(
                "linear params: weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Dense layer `x·Wᵀ + b` over the last axis of `x`.
pub fn linear(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    ops::linear(x, &p.weight, Some(&p.bias))
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    ops::softmax(x, axis)
}
