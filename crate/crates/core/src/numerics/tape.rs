//! Operation tape for reverse-mode differentiation.
//!
//! Each primitive call appends one node holding its output value. Nodes are
//! only ever appended, so inputs always precede their consumers and a single
//! reverse sweep visits every node once.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::graph::Graph;
use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Linear { x: usize, w: usize, b: Option<usize> },
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Concat { parts: Vec<usize>, axis: usize },
    Gather { a: usize, idx: Rc<[Option<usize>]> },
    Scatter { a: usize, idx: Rc<[Option<usize>]>, weights: Option<Rc<[f64]>> },
    Softmax { a: usize, axis: usize },
    Sigmoid(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    BevPool { ctx: usize, probs: usize, cells: Rc<[Option<usize>]> },
    Bce { p: usize, t: Tensor, w: Tensor },
    Focal { p: usize, t: Tensor, w: Tensor, alpha: f64, gamma: f64 },
    L1 { a: usize, t: Tensor, w: Tensor },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::BevPool { ctx, probs, .. } => vec![*ctx, *probs],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gather { a, .. }
            | Op::Scatter { a, .. }
            | Op::Softmax { a, .. }
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Bce { p: a, .. }
            | Op::Focal { p: a, .. }
            | Op::L1 { a, .. } => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Records primitive calls; single owner, not shareable across threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: HashMap<String, Var>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("bindings", &self.bindings.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Makes every later `param(name, ..)` call return `var` instead of a
    /// fresh leaf, so a named parameter can be probed as a plain input.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bindings.insert(name.to_string(), var);
    }

    /// A leaf that receives a gradient but carries no parameter name.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push_leaf(Op::Param(String::new()), t, true)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Reverse sweep from a scalar node. Does not mutate the tape, so calling
    /// it twice yields identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            for (input, g) in self.input_grads(node, &dy) {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(dy);
        }

        if let Some(bad) = grads.iter().flatten().find(|g| !g.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient of shape {:?}",
                bad.shape()
            )));
        }

        let mut names = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if !name.is_empty() {
                    names.entry(name.clone()).or_insert_with(Vec::new).push(id);
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            names,
        })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn input_grads(&self, node: &Node, dy: &Tensor) -> Vec<(usize, Tensor)> {
        let v = |i: usize| &self.nodes[i].value;
        let scalar = || dy.data()[0];
        match &node.op {
            Op::Constant | Op::Param(_) => vec![],
            Op::Linear { x, w, b } => {
                let out_dim = v(*w).shape()[0];
                let mut out = Vec::with_capacity(3);
                if self.needs(*x) {
                    out.push((*x, ops::linear_grad_input(dy, v(*w), v(*x).shape())));
                }
                if self.needs(*w) {
                    out.push((*w, ops::linear_grad_weight(dy, v(*x), out_dim)));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        out.push((*b, ops::linear_grad_bias(dy, out_dim)));
                    }
                }
                out
            }
            Op::Transpose(a) => vec![(*a, ops::transpose(dy).expect("rank-2 grad"))],
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Mul(a, b) => vec![
                (*a, elementwise(dy, v(*b), |g, y| g * y)),
                (*b, elementwise(dy, v(*a), |g, x| g * x)),
            ],
            Op::Scale(a, c) => vec![(*a, dy.map(|g| g * c))],
            Op::Concat { parts, axis } => {
                let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| v(p).shape().to_vec()).collect();
                parts
                    .iter()
                    .copied()
                    .zip(ops::concat_grad(dy, &shapes, *axis))
                    .collect()
            }
            Op::Gather { a, idx } => {
                let g = ops::scatter_add_rows(dy, idx, None, v(*a).outer())
                    .expect("gather grad")
                    .reshaped(v(*a).shape())
                    .expect("gather grad shape");
                vec![(*a, g)]
            }
            Op::Scatter { a, idx, weights } => {
                let mut g = ops::gather_rows(dy, idx).expect("scatter grad");
                if let Some(ws) = weights {
                    let width = (g.len() / idx.len().max(1)).max(1);
                    for (k, row) in g.data_mut().chunks_mut(width).enumerate() {
                        for x in row {
                            *x *= ws[k];
                        }
                    }
                }
                vec![(*a, g)]
            }
            Op::Softmax { axis, .. } => {
                let a = node.op.inputs()[0];
                vec![(a, ops::softmax_grad(&node.value, dy, *axis))]
            }
            Op::Sigmoid(a) => vec![(*a, elementwise(dy, &node.value, |g, s| g * s * (1.0 - s)))],
            Op::Relu(a) => vec![(
                *a,
                elementwise(dy, v(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            )],
            Op::Sum(a) => vec![(*a, Tensor::full(v(*a).shape(), scalar()))],
            Op::Mean(a) => {
                let n = v(*a).len() as f64;
                vec![(*a, Tensor::full(v(*a).shape(), scalar() / n))]
            }
            Op::Reshape(a) => vec![(*a, dy.clone().reshaped(v(*a).shape()).expect("reshape grad"))],
            Op::BevPool { ctx, probs, cells } => {
                let (gc, gp) = ops::bev_pool_grad(v(*ctx), v(*probs), cells, dy);
                vec![(*ctx, gc), (*probs, gp)]
            }
            Op::Bce { p, t, w } => vec![(*p, ops::bce_grad(v(*p), t, w, scalar()))],
            Op::Focal { p, t, w, alpha, gamma } => {
                vec![(*p, ops::focal_grad(v(*p), t, w, *alpha, *gamma, scalar()))]
            }
            Op::L1 { a, t, w } => vec![(*a, ops::l1_grad(v(*a), t, w, scalar()))],
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("elementwise shape")
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    names: BTreeMap<String, Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradients of named parameters, summed over every use of each name.
    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .map(|(name, ids)| {
                let mut acc = Tensor::zeros(&self.shapes[ids[0]]);
                for &id in ids {
                    if let Some(g) = &self.grads[id] {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
                (name.clone(), acc)
            })
            .collect()
    }
}

impl Graph for Tape {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Op::Constant, t, false)
    }

    fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.bindings.get(name) {
            return v;
        }
        self.push_leaf(Op::Param(name.to_string()), t.clone(), true)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let out = ops::linear(self.val(*x), self.val(*w), b.map(|b| self.val(*b)))?;
        Ok(self.push(
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            out,
        ))
    }

    fn transpose(&mut self, a: &Var) -> Result<Var> {
        let out = ops::transpose(self.val(*a))?;
        Ok(self.push(Op::Transpose(a.0), out))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::add(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Add(a.0, b.0), out))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::mul(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Mul(a.0, b.0), out))
    }

    fn scale(&mut self, a: &Var, c: f64) -> Result<Var> {
        let out = ops::scale(self.val(*a), c)?;
        Ok(self.push(Op::Scale(a.0, c), out))
    }

    fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let out = ops::concat(&refs, axis)?;
        Ok(self.push(
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            out,
        ))
    }

    fn gather_rows(&mut self, a: &Var, idx: &[Option<usize>]) -> Result<Var> {
        let out = ops::gather_rows(self.val(*a), idx)?;
        Ok(self.push(
            Op::Gather {
                a: a.0,
                idx: idx.into(),
            },
            out,
        ))
    }

    fn scatter_add_rows(
        &mut self,
        a: &Var,
        idx: &[Option<usize>],
        weights: Option<&[f64]>,
        out_rows: usize,
    ) -> Result<Var> {
        let out = ops::scatter_add_rows(self.val(*a), idx, weights, out_rows)?;
        Ok(self.push(
            Op::Scatter {
                a: a.0,
                idx: idx.into(),
                weights: weights.map(Into::into),
            },
            out,
        ))
    }

    fn softmax(&mut self, a: &Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.val(*a), axis)?;
        Ok(self.push(Op::Softmax { a: a.0, axis }, out))
    }

    fn sigmoid(&mut self, a: &Var) -> Result<Var> {
        let out = ops::sigmoid(self.val(*a));
        Ok(self.push(Op::Sigmoid(a.0), out))
    }

    fn relu(&mut self, a: &Var) -> Result<Var> {
        let out = ops::relu(self.val(*a));
        Ok(self.push(Op::Relu(a.0), out))
    }

    fn sum(&mut self, a: &Var) -> Result<Var> {
        let out = ops::sum(self.val(*a)).check_finite("sum")?;
        Ok(self.push(Op::Sum(a.0), out))
    }

    fn mean(&mut self, a: &Var) -> Result<Var> {
        let out = ops::mean(self.val(*a))?;
        Ok(self.push(Op::Mean(a.0), out))
    }

    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(*a).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(a.0), out))
    }

    fn bev_pool(
        &mut self,
        context: &Var,
        probs: &Var,
        cells: &[Option<usize>],
        n_cells: usize,
    ) -> Result<Var> {
        let out = ops::bev_pool(self.val(*context), self.val(*probs), cells, n_cells)?;
        Ok(self.push(
            Op::BevPool {
                ctx: context.0,
                probs: probs.0,
                cells: cells.into(),
            },
            out,
        ))
    }

    fn bce(&mut self, p: &Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        let out = ops::bce(self.val(*p), target, weight)?;
        Ok(self.push(
            Op::Bce {
                p: p.0,
                t: target.clone(),
                w: weight.clone(),
            },
            out,
        ))
    }

    fn focal(
        &mut self,
        p: &Var,
        target: &Tensor,
        weight: &Tensor,
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        let out = ops::focal(self.val(*p), target, weight, alpha, gamma)?;
        Ok(self.push(
            Op::Focal {
                p: p.0,
                t: target.clone(),
                w: weight.clone(),
                alpha,
                gamma,
            },
            out,
        ))
    }

    fn l1(&mut self, a: &Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        let out = ops::l1(self.val(*a), target, weight)?;
        Ok(self.push(
            Op::L1 {
                a: a.0,
                t: target.clone(),
                w: weight.clone(),
            },
            out,
        ))
    }
}
