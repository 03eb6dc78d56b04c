//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every node stores its forward value
//! and the operation that produced it; node ids are handed out in
//! creation order, so the tape is already topologically sorted and
//! [`Graph::backward`] walks it once from the output down to the leaves.
//!
//! Binary operations require equal shapes. The one exception is a
//! one-element operand, which broadcasts against the other side and
//! receives the summed gradient.
//!
//! Any operation whose forward value contains NaN or infinity is rejected
//! with [`Error::NonFinite`].

mod kernels;

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;


/// Smallest divisor magnitude accepted by [`BinaryOp::Div`].
pub const DIV_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Abs,
    Exp,
    Ln,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// An operation defined outside this module (warping, CRF message passing).
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient of the output, and returns one optional gradient per input.
pub trait Primitive {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Unary(UnaryOp, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    Affine { input: NodeId, scale: f64 },
    Clamp { input: NodeId, lo: f64, hi: f64 },
    Reduce { op: ReduceOp, input: NodeId, axes: Vec<usize> },
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, stride: usize, padding: usize },
    Upsample2x(NodeId),
    ConcatChannels(Vec<NodeId>),
    Reshape(NodeId),
    Select { input: NodeId, index: usize },
    Custom(Box<dyn Primitive>, Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Unary(_, a) | Op::Reshape(a) | Op::Upsample2x(a) => self.requires_grad(*a),
            Op::Affine { input, .. } | Op::Clamp { input, .. } | Op::Reduce { input, .. } | Op::Select { input, .. } => {
                self.requires_grad(*input)
            }
            Op::Binary(_, a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Conv2d { input, weight, bias, .. } => {
                self.requires_grad(*input) || self.requires_grad(*weight) || self.requires_grad(*bias)
            }
            Op::ConcatChannels(ids) | Op::Custom(_, ids) => ids.iter().any(|&i| self.requires_grad(i)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A differentiable leaf (network weight, probe input).
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        let id = self.push(value, Op::Leaf, "param")?;
        self.nodes[id.0].requires_grad = true;
        Ok(id)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Copies the value of `id` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId> {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let (value, name) = match op {
            UnaryOp::Relu => (x.map(|v| v.max(0.0)), "relu"),
            UnaryOp::Sigmoid => (x.map(sigmoid), "sigmoid"),
            UnaryOp::Abs => (x.map(libm::fabs), "abs"),
            UnaryOp::Exp => (x.map(libm::exp), "exp"),
            UnaryOp::Ln => (x.map(libm::log), "ln"),
            UnaryOp::Neg => (x.map(|v| -v), "neg"),
        };
        self.push(value, Op::Unary(op, a), name)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Ln, a)
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let shape = broadcast_shape(name, x, y)?;
        if op == BinaryOp::Div {
            if let Some((i, &v)) = y.data().iter().enumerate().find(|(_, v)| libm::fabs(**v) < DIV_GUARD) {
                return Err(Error::DivisionGuard { index: i, value: v });
            }
        }
        let f = |p: f64, q: f64| match op {
            BinaryOp::Add => p + q,
            BinaryOp::Sub => p - q,
            BinaryOp::Mul => p * q,
            BinaryOp::Div => p / q,
        };
        let n: usize = shape.iter().product();
        let (xd, yd) = (x.data(), y.data());
        let (xs, ys) = (xd.len() == 1, yd.len() == 1);
        let data = (0..n)
            .map(|i| f(xd[if xs { 0 } else { i }], yd[if ys { 0 } else { i }]))
            .collect();
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::Binary(op, a, b), name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v * scale);
        self.push(value, Op::Affine { input: a, scale }, "scale")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { input: a, lo, hi }, "clamp")
    }

    /// Sums or averages over `axes` (all axes when `None`). Reduced axes are
    /// dropped; a full reduction yields shape `[1]`.
    pub fn reduce(&mut self, op: ReduceOp, a: NodeId, axes: Option<&[usize]>) -> Result<NodeId> {
        let x = self.value(a);
        let rank = x.rank();
        let axes: Vec<usize> = match axes {
            None => (0..rank).collect(),
            Some(list) => {
                if let Some(&bad) = list.iter().find(|&&ax| ax >= rank) {
                    return Err(Error::InvalidAxis { axis: bad, rank });
                }
                let mut v = list.to_vec();
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        let (out_shape, strides) = kernels::reduce_layout(x.shape(), &axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        let xd = x.data();
        kernels::for_each_reduced(x.shape(), &strides, |i, o| out[o] += xd[i]);
        if op == ReduceOp::Mean {
            let count = (x.len() / out.len()) as f64;
            out.iter_mut().for_each(|v| *v /= count);
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push(value, Op::Reduce { op, input: a, axes }, "reduce")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.reduce(ReduceOp::Sum, a, None)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.reduce(ReduceOp::Mean, a, None)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geo = kernels::conv2d_geometry(x, w, b, stride, padding)?;
        let value = kernels::conv2d_forward(&geo, x.data(), w.data(), b.data());
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            "conv2d",
        )
    }

    pub fn upsample2x(&mut self, a: NodeId) -> Result<NodeId> {
        let value = kernels::upsample2x_forward(self.value(a))?;
        self.push(value, Op::Upsample2x(a), "upsample2x")
    }

    /// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs.first().ok_or(Error::InvalidShape {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let [n, _, h, w] = self.value(first).dims4("concat")?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let [ni, ci, hi, wi] = self.value(id).dims4("concat")?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    expected: vec![n, ci, h, w],
                    found: self.value(id).shape().to_vec(),
                });
            }
            channels.push(ci);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (&id, &ci) in inputs.iter().zip(&channels) {
                data.extend_from_slice(&self.value(id).data()[s * ci * plane..][..ci * plane]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], data)?;
        self.push(value, Op::ConcatChannels(inputs.to_vec()), "concat")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    /// Picks element `index` of the flattened tensor as a `[1]` tensor.
    pub fn select(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let x = self.value(a);
        let v = *x.data().get(index).ok_or(Error::InvalidAxis {
            axis: index,
            rank: x.len(),
        })?;
        self.push(Tensor::scalar(v), Op::Select { input: a, index }, "select")
    }

    pub fn apply(&mut self, prim: Box<dyn Primitive>, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let value = prim.forward(&values)?;
        let name = prim.name();
        self.push(value, Op::Custom(prim, inputs.to_vec()), name)
    }

    /// Backward from a one-element output with seed 1.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::InvalidShape {
                op: "backward",
                reason: alloc::format!("output must hold one element, has shape {:?}", out.shape()),
            });
        }
        let seed = Tensor::full(out.shape(), 1.0);
        self.backward_with_seed(output, seed)
    }

    pub fn backward_with_seed(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        seed.expect_shape("backward", self.value(output).shape())?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let parts = self.node_backward(node, &g)?;
            for (parent, pg) in parts {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Interior gradients stay available for inspection.
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let out = &node.value;
        let mut parts = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                let x = self.value(*a);
                let d = match op {
                    UnaryOp::Relu => x.zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?,
                    UnaryOp::Sigmoid => out.zip_map(g, |s, gv| gv * s * (1.0 - s))?,
                    UnaryOp::Abs => x.zip_map(g, |v, gv| if v >= 0.0 { gv } else { -gv })?,
                    UnaryOp::Exp => out.zip_map(g, |e, gv| gv * e)?,
                    UnaryOp::Ln => x.zip_map(g, |v, gv| gv / v)?,
                    UnaryOp::Neg => g.map(|gv| -gv),
                };
                parts.push((*a, d));
            }
            Op::Binary(op, a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let n = out.len();
                let (xd, yd, gd) = (x.data(), y.data(), g.data());
                let xi = |i: usize| xd[if xd.len() == 1 { 0 } else { i }];
                let yi = |i: usize| yd[if yd.len() == 1 { 0 } else { i }];
                let (ga, gb): (Vec<f64>, Vec<f64>) = (0..n)
                    .map(|i| match op {
                        BinaryOp::Add => (gd[i], gd[i]),
                        BinaryOp::Sub => (gd[i], -gd[i]),
                        BinaryOp::Mul => (gd[i] * yi(i), gd[i] * xi(i)),
                        BinaryOp::Div => (gd[i] / yi(i), -gd[i] * xi(i) / (yi(i) * yi(i))),
                    })
                    .unzip();
                parts.push((*a, fold_broadcast(ga, x)?));
                parts.push((*b, fold_broadcast(gb, y)?));
            }
            Op::Affine { input, scale } => parts.push((*input, g.map(|v| v * scale))),
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input);
                let d = x.zip_map(g, |v, gv| if v < *lo || v > *hi { 0.0 } else { gv })?;
                parts.push((*input, d));
            }
            Op::Reduce { op, input, axes } => {
                let x = self.value(*input);
                let (_, strides) = kernels::reduce_layout(x.shape(), axes);
                let scale = match op {
                    ReduceOp::Sum => 1.0,
                    ReduceOp::Mean => out.len() as f64 / x.len() as f64,
                };
                let mut d = vec![0.0; x.len()];
                let gd = g.data();
                kernels::for_each_reduced(x.shape(), &strides, |i, o| d[i] = gd[o] * scale);
                parts.push((*input, Tensor::new(x.shape(), d)?));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (x, w, b) = (self.value(*input), self.value(*weight), self.value(*bias));
                let geo = kernels::conv2d_geometry(x, w, b, *stride, *padding)?;
                let (gx, gw, gb) = kernels::conv2d_backward(
                    &geo,
                    x.data(),
                    w.data(),
                    g.data(),
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                    self.requires_grad(*bias),
                );
                parts.extend(gx.map(|t| (*input, t)));
                parts.extend(gw.map(|t| (*weight, t)));
                parts.extend(gb.map(|t| (*bias, t)));
            }
            Op::Upsample2x(a) => {
                parts.push((*a, kernels::upsample2x_backward(g, self.value(*a).shape())));
            }
            Op::ConcatChannels(ids) => {
                let [n, total, h, w] = out.dims4("concat")?;
                let plane = h * w;
                let mut offset = 0;
                for &id in ids {
                    let ci = self.value(id).shape()[1];
                    let mut d = Vec::with_capacity(n * ci * plane);
                    for s in 0..n {
                        let start = (s * total + offset) * plane;
                        d.extend_from_slice(&g.data()[start..start + ci * plane]);
                    }
                    parts.push((id, Tensor::new(&[n, ci, h, w], d)?));
                    offset += ci;
                }
            }
            Op::Reshape(a) => parts.push((*a, g.reshape(self.value(*a).shape())?)),
            Op::Select { input, index } => {
                let x = self.value(*input);
                let mut d = vec![0.0; x.len()];
                d[*index] = g.item();
                parts.push((*input, Tensor::new(x.shape(), d)?));
            }
            Op::Custom(prim, ids) => {
                let values: Vec<&Tensor> = ids.iter().map(|&i| self.value(i)).collect();
                let grads = prim.backward(&values, out, g)?;
                for (&id, gi) in ids.iter().zip(grads) {
                    if let Some(t) = gi {
                        t.expect_shape(prim.name(), self.value(id).shape())?;
                        parts.push((id, t));
                    }
                }
            }
        }
        Ok(parts)
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

fn broadcast_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<Vec<usize>> {
    if x.shape() == y.shape() {
        Ok(x.shape().to_vec())
    } else if y.len() == 1 {
        Ok(x.shape().to_vec())
    } else if x.len() == 1 {
        Ok(y.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            expected: x.shape().to_vec(),
            found: y.shape().to_vec(),
        })
    }
}

fn fold_broadcast(grad: Vec<f64>, operand: &Tensor) -> Result<Tensor> {
    if operand.len() == grad.len() {
        Tensor::new(operand.shape(), grad)
    } else {
        Ok(Tensor::full(operand.shape(), grad.iter().sum()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_scalar_multiply() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 3.0)).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = crate::Rng::new(3);
        let input = Tensor::rand_uniform(&[2, 1, 4, 5], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(input.clone()).unwrap();
        let w = g.constant(Tensor::ones(&[1, 1, 1, 1])).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn conv_rejects_non_integral_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 5, 5])).unwrap();
        let w = g.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        assert!(matches!(g.conv2d(x, w, b, 2, 0), Err(Error::InvalidShape { .. })));
        let wbad = g.constant(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        assert!(matches!(g.conv2d(x, wbad, b, 1, 1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_matches_direct_sum() {
        // Direct evaluation of the cross-correlation as the oracle.
        let mut rng = crate::Rng::new(11);
        let (n, c, h, w, k, kh, kw, s, p) = (2, 2, 5, 6, 3, 3, 2, 2, 1);
        let x = Tensor::rand_uniform(&[n, c, h, w], -1.0, 1.0, &mut rng);
        let wt = Tensor::rand_uniform(&[k, c, kh, kw], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[k], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (xi, wi, bi) = (
            g.constant(x.clone()).unwrap(),
            g.constant(wt.clone()).unwrap(),
            g.constant(b.clone()).unwrap(),
        );
        let y = g.conv2d(xi, wi, bi, s, p).unwrap();
        let out = g.value(y);
        let (oh, ow) = ((h + 2 * p - kh) / s + 1, (w + 2 * p - kw) / s + 1);
        assert_eq!(out.shape(), &[n, k, oh, ow]);
        for ni in 0..n {
            for ki in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[ki];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt.data()[((ki * c + ci) * kh + ky) * kw + kx]
                                        * x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        let got = out.data()[((ni * k + ki) * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, -3.0, 3.0])).unwrap();
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn div_guard_and_shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let z = g.constant(Tensor::from_vec(vec![1.0, 0.0])).unwrap();
        assert!(matches!(g.div(a, z), Err(Error::DivisionGuard { index: 1, .. })));
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { .. })));
        // Scalars broadcast.
        let two = g.constant(Tensor::scalar(2.0)).unwrap();
        let m = g.mul(c, two).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        let grads = g.backward(m).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = g.constant(Tensor::zeros(&[4])).unwrap();
        let s = g.sum(z).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        assert!(matches!(
            g.reduce(ReduceOp::Sum, x, Some(&[1])),
            Err(Error::InvalidAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn reduce_over_axes() {
        let mut g = Graph::new();
        let x = g
            .param(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let r = g.reduce(ReduceOp::Sum, x, Some(&[0])).unwrap();
        assert_eq!(g.value(r).data(), &[5.0, 7.0, 9.0]);
        let r = g.reduce(ReduceOp::Mean, x, Some(&[1])).unwrap();
        assert_eq!(g.value(r).data(), &[2.0, 5.0]);
    }

    #[test]
    fn upsample_values_and_fanout() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let u = g.upsample2x(x).unwrap();
        assert_eq!(g.value(u).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(u).data(), &[1.0; 4]);
        let s = g.sum(u).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        assert!(g.constant(Tensor::scalar(f64::NAN)).is_err());
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(g.ln(z), Err(Error::NonFinite { op: "ln" })));
    }

    #[test]
    fn concat_and_select_route_gradients() {
        let mut g = Graph::new();
        let a = g.param(Tensor::full(&[1, 1, 1, 2], 1.0)).unwrap();
        let b = g.param(Tensor::full(&[1, 2, 1, 2], 2.0)).unwrap();
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 3, 1, 2]);
        let v = g.select(c, 2).unwrap();
        assert_eq!(g.value(v).item(), 2.0);
        let grads = g.backward(v).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
