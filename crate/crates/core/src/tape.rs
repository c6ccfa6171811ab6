//! Op-level reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor produced during a forward pass together
//! with the operation that produced it. [`Tape::backward`] walks the
//! records in reverse insertion order (a valid reverse topological order,
//! since inputs are always recorded before their consumers) and writes the
//! accumulated gradient into each tensor's `grad` field.
//!
//! A tape is single-writer; build one per forward/backward computation.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::loss::{self, LossWeights};
use crate::ops::{self, conv, ConvKernel, KernelKind};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A [`ConvKernel`] whose weight and bias live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundKernel {
    pub kind: KernelKind,
    pub weight: Var,
    pub bias: Var,
    pub dilation: usize,
    pub stride: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, dilation: usize },
    Depthwise { x: Var, w: Var, b: Var },
    Transpose { x: Var, w: Var, b: Var, stride: usize },
    Upsample { x: Var, factor: usize },
    Relu { x: Var },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Tensor4<T> },
    Loss { target: Var, pred: Var, weights: LossWeights },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    trainable: bool,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Record a trainable tensor; it receives a gradient on backward.
    pub fn param(&mut self, value: Tensor4<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Record a kernel's weight and bias as trainable leaves.
    pub fn param_kernel(&mut self, kernel: &ConvKernel<T>) -> Result<BoundKernel> {
        self.bind_kernel(kernel, true)
    }

    /// Record a kernel that takes part in the forward pass only.
    pub fn constant_kernel(&mut self, kernel: &ConvKernel<T>) -> Result<BoundKernel> {
        self.bind_kernel(kernel, false)
    }

    fn bind_kernel(&mut self, kernel: &ConvKernel<T>, trainable: bool) -> Result<BoundKernel> {
        kernel.validate()?;
        let weight = self.push_leaf(kernel.weight.clone(), trainable);
        let bias = self.push_leaf(Tensor4::vector(kernel.bias.clone())?, trainable);
        Ok(BoundKernel {
            kind: kernel.kind,
            weight,
            bias,
            dilation: kernel.dilation,
            stride: kernel.stride,
        })
    }

    fn push_leaf(&mut self, value: Tensor4<T>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Tape::backward`] root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    fn bias_of(&self, b: Var, channels: usize) -> Result<&[T]> {
        let bias = self.value(b);
        if bias.shape().len() != channels {
            return Err(shape_err(format!(
                "bias has {} elements, expected {channels}",
                bias.shape().len()
            )));
        }
        Ok(bias.data())
    }

    fn check_in_channels(&self, x: Var, w: Var) -> Result<()> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if ws.w != xs.c {
            return Err(shape_err(format!("kernel {ws} expects {} input channels, input is {xs}", ws.w)));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        if dilation == 0 {
            return Err(arg_err("dilation must be >= 1"));
        }
        self.check_in_channels(x, w)?;
        let ws = self.value(w).shape();
        let out = {
            let bias = self.bias_of(b, ws.c)?;
            conv::conv2d_forward(self.value(x), self.value(w), bias, dilation)
        };
        Ok(self.push(out, Op::Conv2d { x, w, b, dilation }, &[x, w, b]))
    }

    pub fn pointwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.value(w).shape();
        if ws.n != 1 || ws.h != 1 {
            return Err(arg_err(format!("pointwise kernel must be 1x1, got {ws}")));
        }
        self.conv2d(x, w, b, 1)
    }

    pub fn depthwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.value(w).shape();
        if ws.c != 1 {
            return Err(arg_err(format!("depthwise kernel must be (kh, kw, c, 1), got {ws}")));
        }
        self.check_in_channels(x, w)?;
        let out = {
            let bias = self.bias_of(b, ws.w)?;
            conv::depthwise_forward(self.value(x), self.value(w), bias)
        };
        Ok(self.push(out, Op::Depthwise { x, w, b }, &[x, w, b]))
    }

    pub fn transpose_conv(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(arg_err("stride must be >= 1"));
        }
        self.check_in_channels(x, w)?;
        let ws = self.value(w).shape();
        let out = {
            let bias = self.bias_of(b, ws.c)?;
            conv::transpose_forward(self.value(x), self.value(w), bias, stride)
        };
        Ok(self.push(out, Op::Transpose { x, w, b, stride }, &[x, w, b]))
    }

    /// Apply a bound kernel according to its kind.
    pub fn apply(&mut self, x: Var, k: &BoundKernel) -> Result<Var> {
        match k.kind {
            KernelKind::Standard => self.conv2d(x, k.weight, k.bias, k.dilation),
            KernelKind::Pointwise => self.pointwise(x, k.weight, k.bias),
            KernelKind::Depthwise => self.depthwise(x, k.weight, k.bias),
            KernelKind::Transpose => self.transpose_conv(x, k.weight, k.bias, k.stride),
        }
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(out, Op::Upsample { x, factor }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let out = {
            let refs: Vec<&Tensor4<T>> = parts.iter().map(|&p| self.value(p)).collect();
            ops::concat_channels(&refs)?
        };
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor4::scalar(s), Op::Sum { x }, &[x])
    }

    /// `sum(x * weights)` with constant `weights`.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor4<T>) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(shape_err(format!(
                "weights {} do not match input {}",
                weights.shape(),
                self.value(x).shape()
            )));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        Ok(self.push(Tensor4::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Composite reconstruction loss between a target and a prediction.
    pub fn loss(&mut self, target: Var, pred: Var, weights: LossWeights) -> Result<Var> {
        let value = loss::loss_total(self.value(target), self.value(pred), &weights)?;
        Ok(self.push(Tensor4::scalar(value), Op::Loss { target, pred, weights }, &[target, pred]))
    }

    /// Back-propagate from a scalar `root`. Returns the number of recorded
    /// operations visited. Every trainable leaf ends up with a gradient,
    /// zero if it did not contribute to `root`.
    pub fn backward(&mut self, root: Var) -> Result<usize> {
        if self.value(root).shape().len() != 1 {
            return Err(arg_err(format!(
                "backward needs a scalar root, got {}",
                self.value(root).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        let mut visited = 0;

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::Leaf) {
                visited += 1;
                if node.needs_grad {
                    let gt = Tensor4::from_vec(node.value.shape(), g.clone())?;
                    for (input, gi) in self.vjp(&node.op, &gt)? {
                        accumulate(&mut grads[input.0], gi)?;
                    }
                }
            }
            self.nodes[idx].value.set_grad(g)?;
        }

        for node in self.nodes.iter_mut().filter(|n| n.trainable) {
            if node.value.grad().is_none() {
                let zeros = vec![T::zero(); node.value.shape().len()];
                node.value.set_grad(zeros)?;
            }
        }
        Ok(visited)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn vjp(&self, op: &Op<T>, g: &Tensor4<T>) -> Result<Vec<(Var, Vec<T>)>> {
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dilation } => {
                let (gx, gw) = conv::conv2d_backward(self.value(*x), self.value(*w), g, *dilation);
                self.push_conv_grads(&mut out, (*x, gx), (*w, gw), *b, g);
            }
            Op::Depthwise { x, w, b } => {
                let (gx, gw) = conv::depthwise_backward(self.value(*x), self.value(*w), g);
                self.push_conv_grads(&mut out, (*x, gx), (*w, gw), *b, g);
            }
            Op::Transpose { x, w, b, stride } => {
                let (gx, gw) = conv::transpose_backward(self.value(*x), self.value(*w), g, *stride);
                self.push_conv_grads(&mut out, (*x, gx), (*w, gw), *b, g);
            }
            Op::Upsample { x, factor } => {
                if self.wants(*x) {
                    out.push((*x, conv::upsample_backward(self.value(*x).shape(), g, *factor)));
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    // subgradient 0 at exactly 0
                    let gx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    out.push((*x, gx));
                }
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).shape().c;
                    if self.wants(p) {
                        out.push((p, g.slice_channels(start, c)?.into_data()));
                    }
                    start += c;
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        out.push((v, g.data().to_vec()));
                    }
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    out.push((*x, vec![g.data()[0]; self.value(*x).shape().len()]));
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.wants(*x) {
                    let s = g.data()[0];
                    out.push((*x, weights.data().iter().map(|&w| w * s).collect()));
                }
            }
            Op::Loss { target, pred, weights } => {
                if self.wants(*pred) {
                    let s = g.data()[0];
                    let gp = loss::loss_total_grad(self.value(*target), self.value(*pred), weights)?;
                    out.push((*pred, gp.into_iter().map(|v| v * s).collect()));
                }
                if self.wants(*target) {
                    return Err(Error::Internal(
                        "gradient with respect to the loss target is not supported".into(),
                    ));
                }
            }
        }
        Ok(out)
    }

    fn push_conv_grads(
        &self,
        out: &mut Vec<(Var, Vec<T>)>,
        gx: (Var, Vec<T>),
        gw: (Var, Vec<T>),
        b: Var,
        g: &Tensor4<T>,
    ) {
        for (v, grad) in [gx, gw] {
            if self.wants(v) {
                out.push((v, grad));
            }
        }
        if self.wants(b) {
            out.push((b, conv::bias_grad(g)));
        }
    }

    /// Extract a recorded tensor (with its gradient, if any).
    pub fn tensor(&self, v: Var) -> Tensor4<T> {
        self.nodes[v.0].value.clone()
    }

    /// Gradient of a bound kernel as a plain [`ConvKernel`].
    pub fn kernel_grad(&self, k: &BoundKernel) -> Result<ConvKernel<T>> {
        let missing = || Error::Internal("kernel has no gradient; run backward first".into());
        let gw = self.grad(k.weight).ok_or_else(missing)?.to_vec();
        let gb = self.grad(k.bias).ok_or_else(missing)?.to_vec();
        let ws: Shape4 = self.value(k.weight).shape();
        Ok(ConvKernel {
            kind: k.kind,
            weight: Tensor4::from_vec(ws, gw)?,
            bias: gb,
            dilation: k.dilation,
            stride: k.stride,
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.len() != g.len() {
                return Err(Error::Internal("gradient length mismatch".into()));
            }
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor4::vector(vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), Some(&[0.0, 1.0][..]));
    }

    #[test]
    fn relu_gradient_is_zero_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor4::vector(vec![0.0]).unwrap());
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), Some(&[0.0][..]));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor4::vector(vec![1.0, 2.0]).unwrap());
        let r = tape.relu(x);
        assert!(matches!(tape.backward(r), Err(Error::Argument(_))));
    }

    #[test]
    fn unused_params_get_zero_grad_and_each_op_is_visited_once() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor4::vector(vec![1.0, -2.0]).unwrap());
        let unused = tape.param(Tensor4::vector(vec![5.0]).unwrap());
        let c = tape.constant(Tensor4::vector(vec![3.0, 3.0]).unwrap());
        let a = tape.add(x, c).unwrap();
        let r = tape.relu(a);
        let b = tape.add(r, x).unwrap();
        let s = tape.sum(b);
        let visited = tape.backward(s).unwrap();
        assert_eq!(visited, 4);
        assert_eq!(tape.grad(unused), Some(&[0.0][..]));
        assert_eq!(tape.grad(x), Some(&[2.0, 2.0][..]));
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn diamond_accumulates() {
        // s = sum(x + x) -> ds/dx = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor4::vector(vec![0.3, -0.7, 1.1]).unwrap());
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), Some(&[2.0, 2.0, 2.0][..]));
    }
}
