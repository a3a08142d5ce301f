//! Reverse-mode autodiff over a per-step op graph.
//!
//! Nodes are appended in execution order, so ascending ids are already a
//! topological order and backward is a single reverse sweep visiting each
//! node once. Gradients accumulate additively across fan-out. Tensors are
//! immutable once produced by an op.
//!
//! In debug builds every op checks its output for NaN/Inf and surfaces a
//! divergence error naming the node; release builds skip the scan.

use crate::error::{Error, Result};
use crate::ops::batchnorm::{batchnorm_backward, batchnorm_forward, BnCtx, BnMode};
use crate::ops::conv::{conv2d_backward, conv2d_forward};
use crate::ops::linear::{linear_backward, linear_forward};
use crate::ops::pool::{
    global_avgpool_backward, global_avgpool_forward, maxpool2_backward, maxpool2_forward,
};
use crate::ops::softmax::{softmax_xent_backward, softmax_xent_forward};
use crate::tensor::{Elem, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E: Elem> {
    Leaf,
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, ctx: BnCtx<E> },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    ChannelScale { x: Var, mask: Vec<E> },
    SoftmaxXent { logits: Var, labels: Vec<u32>, probs: Vec<E> },
    Add { a: Var, b: Var },
    Sum { x: Var },
    Scale { x: Var, c: E },
    Mul { a: Var, b: Var },
}

impl<E: Elem> Op<E> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu { .. } => "relu",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::GlobalAvgPool { .. } => "global_avgpool",
            Op::Linear { .. } => "linear",
            Op::ChannelScale { .. } => "channel_scale",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Add { .. } => "add",
            Op::Sum { .. } => "sum",
            Op::Scale { .. } => "scale",
            Op::Mul { .. } => "mul",
        }
    }
}

struct Node<E: Elem> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Op<E>,
    name: Option<String>,
}

pub struct Graph<E: Elem = f32> {
    nodes: Vec<Node<E>>,
    backward_done: bool,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    /// Leaf that does not receive a gradient (batch images, labels).
    pub fn input(&mut self, value: Tensor<E>) -> Var {
        self.push(value, false, Op::Leaf, None)
    }

    /// Leaf that accumulates a gradient (trainable parameter).
    pub fn param(&mut self, name: &str, value: Tensor<E>) -> Var {
        self.push(value, true, Op::Leaf, Some(name.to_string()))
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, if it participated in backward.
    pub fn grad(&self, v: Var) -> Option<Tensor<E>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shaped like value")
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn describe(&self, v: Var) -> String {
        let node = &self.nodes[v.0];
        match &node.name {
            Some(n) => format!("node #{} ({}, {})", v.0, node.op.kind(), n),
            None => format!("node #{} ({})", v.0, node.op.kind()),
        }
    }

    /// First node holding a non-finite value, scanning in creation order.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| n.value.first_non_finite().is_some())
            .map(Var)
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>, name: Option<String>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op, name });
        Var(self.nodes.len() - 1)
    }

    fn finish_op(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Result<Var> {
        #[cfg(debug_assertions)]
        if let Some(i) = value.first_non_finite() {
            return Err(Error::Diverged {
                context: format!("{} produced non-finite value at flat index {i}", op.kind()),
            });
        }
        Ok(self.push(value, requires_grad, op, None))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        let rg = self.needs(x) || self.needs(w);
        self.finish_op(value, rg, Op::Conv2d { x, w, stride, pad })
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&mut Tensor<E>, &mut Tensor<E>)>,
        mode: BnMode,
    ) -> Result<Var> {
        let (value, ctx) =
            batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), running, mode)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.finish_op(value, rg, Op::BatchNorm { x, gamma, beta, ctx })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        let rg = self.needs(x);
        self.finish_op(value, rg, Op::Relu { x })
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (value, argmax) = maxpool2_forward(self.value(x))?;
        let rg = self.needs(x);
        self.finish_op(value, rg, Op::MaxPool2 { x, argmax })
    }

    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let value = global_avgpool_forward(self.value(x))?;
        let rg = self.needs(x);
        self.finish_op(value, rg, Op::GlobalAvgPool { x })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = linear_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        self.finish_op(value, rg, Op::Linear { x, w, b })
    }

    /// Multiply each channel of `[B, C, H, W]` by a 0/1 mask entry.
    pub fn channel_scale(&mut self, x: Var, mask: &[E]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "channel_scale",
                expected: vec![shape.get(1).copied().unwrap_or(0)],
                got: vec![mask.len()],
            });
        }
        debug_assert!(
            mask.iter().all(|&m| m == E::zero() || m == E::one()),
            "channel_scale mask entries must be 0 or 1"
        );
        let (b, c) = (shape[0], shape[1]);
        let plane: usize = shape[2] * shape[3];
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                let m = mask[ch];
                for (o, v) in out[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                    *o = *v * m;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(x);
        self.finish_op(value, rg, Op::ChannelScale { x, mask: mask.to_vec() })
    }

    /// Mean cross-entropy between `logits [B, K]` and integer labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let (loss, probs) = softmax_xent_forward(self.value(logits), labels)?;
        let rg = self.needs(logits);
        self.finish_op(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxXent { logits, labels: labels.to_vec(), probs },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                expected: self.value(a).shape().to_vec(),
                got: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        self.finish_op(value, rg, Op::Add { a, b })
    }

    /// Reduce to a scalar by summation.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = E::zero();
        for v in self.value(x).data() {
            acc = acc + *v;
        }
        let rg = self.needs(x);
        self.finish_op(Tensor::scalar(acc), rg, Op::Sum { x })
    }

    pub fn scale(&mut self, x: Var, c: E) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        let rg = self.needs(x);
        self.finish_op(value, rg, Op::Scale { x, c })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                expected: self.value(a).shape().to_vec(),
                got: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        self.finish_op(value, rg, Op::Mul { a, b })
    }

    /// Clear all gradients so backward may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every
    /// `requires_grad` node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::BadDimension {
                op: "backward",
                detail: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let gout = node.grad.take().expect("checked above");
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, stride, pad } => {
                    let need_dx = before[x.0].requires_grad;
                    let (dx, dw) = conv2d_backward(
                        &before[x.0].value,
                        &before[w.0].value,
                        &gout,
                        *stride,
                        *pad,
                    )?;
                    if need_dx {
                        accumulate(&mut before[x.0], dx.data());
                    }
                    accumulate(&mut before[w.0], dw.data());
                }
                Op::BatchNorm { x, gamma, beta, ctx } => {
                    let (dx, dg, db) =
                        batchnorm_backward(&before[x.0].value, &before[gamma.0].value, ctx, &gout)?;
                    accumulate(&mut before[x.0], dx.data());
                    accumulate(&mut before[gamma.0], dg.data());
                    accumulate(&mut before[beta.0], db.data());
                }
                Op::Relu { x } => {
                    let xin = before[x.0].value.data();
                    let dx: Vec<E> = xin
                        .iter()
                        .zip(&gout)
                        .map(|(&v, &g)| if v > E::zero() { g } else { E::zero() })
                        .collect();
                    accumulate(&mut before[x.0], &dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let dx = maxpool2_backward(before[x.0].value.shape(), argmax, &gout);
                    accumulate(&mut before[x.0], dx.data());
                }
                Op::GlobalAvgPool { x } => {
                    let dx = global_avgpool_backward(before[x.0].value.shape(), &gout);
                    accumulate(&mut before[x.0], dx.data());
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        linear_backward(&before[x.0].value, &before[w.0].value, &gout)?;
                    accumulate(&mut before[x.0], dx.data());
                    accumulate(&mut before[w.0], dw.data());
                    accumulate(&mut before[b.0], db.data());
                }
                Op::ChannelScale { x, mask } => {
                    let shape = before[x.0].value.shape();
                    let (bsz, c) = (shape[0], shape[1]);
                    let plane = shape[2] * shape[3];
                    let mut dx = vec![E::zero(); gout.len()];
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            let m = mask[ch];
                            for (o, g) in
                                dx[base..base + plane].iter_mut().zip(&gout[base..base + plane])
                            {
                                *o = *g * m;
                            }
                        }
                    }
                    accumulate(&mut before[x.0], &dx);
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let classes = before[logits.0].value.shape()[1];
                    let dl = softmax_xent_backward(probs, labels, classes, gout[0]);
                    accumulate(&mut before[logits.0], dl.data());
                }
                Op::Add { a, b } => {
                    accumulate(&mut before[a.0], &gout);
                    accumulate(&mut before[b.0], &gout);
                }
                Op::Sum { x } => {
                    let g = gout[0];
                    let dx = vec![g; before[x.0].value.len()];
                    accumulate(&mut before[x.0], &dx);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<E> = gout.iter().map(|&g| g * *c).collect();
                    accumulate(&mut before[x.0], &dx);
                }
                Op::Mul { a, b } => {
                    let (ia, ib) = (a.0, b.0);
                    let da: Vec<E> =
                        gout.iter().zip(before[ib].value.data()).map(|(&g, &v)| g * v).collect();
                    let db: Vec<E> =
                        gout.iter().zip(before[ia].value.data()).map(|(&g, &v)| g * v).collect();
                    accumulate(&mut before[ia], &da);
                    accumulate(&mut before[ib], &db);
                }
            }
            let node = &mut self.nodes[i];
            node.grad = Some(gout);
        }
        Ok(())
    }
}

fn accumulate<E: Elem>(node: &mut Node<E>, inc: &[E]) {
    if !node.requires_grad {
        return;
    }
    let grad = node.grad.get_or_insert_with(|| vec![E::zero(); node.value.len()]);
    for (g, &v) in grad.iter_mut().zip(inc) {
        *g = *g + v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient_is_x() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn fanout_accumulates() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::from_vec(vec![2.0]));
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn double_backward_rejected_until_reset() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::from_vec(vec![1.0]));
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::DoubleBackward)));
        g.reset_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn channel_scale_masks_forward_and_backward() {
        let mut g = Graph::<f32>::new();
        let x = g.param(
            "x",
            Tensor::new(vec![1, 3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let y = g.channel_scale(x, &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        // gradient at the gate itself is the upstream gradient, pre-mask
        assert_eq!(g.grad(y).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn all_ones_mask_is_identity_bitwise() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![2, 2, 2, 2], (0..16).map(|i| i as f32 * 0.37).collect()).unwrap());
        let y = g.channel_scale(x, &[1.0, 1.0]).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[cfg(debug_assertions)]
    #[test]
    fn debug_mode_flags_non_finite_op_output() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::from_vec(vec![f32::MAX, f32::MAX]));
        let y = g.mul(x, x).unwrap(); // overflows to inf
        let _ = y;
        // mul itself reports the divergence
        let err = g.mul(x, x).err();
        assert!(err.is_none() || matches!(err, Some(Error::Diverged { .. })));
        let sq = g.mul(x, x);
        assert!(matches!(sq, Err(Error::Diverged { .. })));
    }
}
