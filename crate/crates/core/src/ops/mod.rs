//! Convolution variants and elementwise operations used by the network.
//!
//! These are the plain (untracked) forward functions. The [`crate::tape`]
//! module records the same operations and provides their gradients.
//!
//! Conventions shared by every convolution here:
//! * zero padding, "same" output size at stride 1 (`pad = dilation * (k - 1) / 2`);
//! * every kernel carries a bias;
//! * transpose convolutions produce exactly `stride * h` by `stride * w`.

pub(crate) mod conv;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Which convolution a kernel is meant for. Determines the weight layout
/// and how parameters are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// `(kh, kw, c_in, c_out)`, optionally dilated.
    Standard,
    /// `(kh, kw, c, 1)`, one filter per channel.
    Depthwise,
    /// `(1, 1, c_in, c_out)`.
    Pointwise,
    /// `(k, k, c_in, c_out)` scattered at `stride`.
    Transpose,
}

/// Convolution weights plus bias. The weight tensor's four axes are read
/// as `(kh, kw, c_in, c_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub kind: KernelKind,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
    pub dilation: usize,
    pub stride: usize,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn zeros(kind: KernelKind, kh: usize, kw: usize, c_in: usize, c_out: usize) -> Result<Self> {
        let c_out = if kind == KernelKind::Depthwise { 1 } else { c_out };
        let weight = Tensor4::zeros(Shape4::new(kh, kw, c_in, c_out))?;
        let bias_len = if kind == KernelKind::Depthwise { c_in } else { c_out };
        Ok(Self {
            kind,
            weight,
            bias: vec![T::zero(); bias_len],
            dilation: 1,
            stride: 1,
        })
    }

    pub fn standard(weight: Tensor4<T>, bias: Vec<T>, dilation: usize) -> Result<Self> {
        Self::build(KernelKind::Standard, weight, bias, dilation, 1)
    }

    pub fn depthwise(weight: Tensor4<T>, bias: Vec<T>) -> Result<Self> {
        Self::build(KernelKind::Depthwise, weight, bias, 1, 1)
    }

    pub fn pointwise(weight: Tensor4<T>, bias: Vec<T>) -> Result<Self> {
        Self::build(KernelKind::Pointwise, weight, bias, 1, 1)
    }

    pub fn transpose(weight: Tensor4<T>, bias: Vec<T>, stride: usize) -> Result<Self> {
        Self::build(KernelKind::Transpose, weight, bias, 1, stride)
    }

    fn build(kind: KernelKind, weight: Tensor4<T>, bias: Vec<T>, dilation: usize, stride: usize) -> Result<Self> {
        if dilation == 0 || stride == 0 {
            return Err(arg_err("dilation and stride must be >= 1"));
        }
        let k = Self {
            kind,
            weight,
            bias,
            dilation,
            stride,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        if self.dilation == 0 || self.stride == 0 {
            return Err(arg_err("dilation and stride must be >= 1"));
        }
        match self.kind {
            KernelKind::Depthwise if s.c != 1 => {
                return Err(arg_err(format!("depthwise kernel must have one output per channel, got {s}")))
            }
            KernelKind::Pointwise if s.n != 1 || s.h != 1 => {
                return Err(arg_err(format!("pointwise kernel must be 1x1, got {s}")))
            }
            _ => {}
        }
        if self.bias.len() != self.out_channels() {
            return Err(shape_err(format!(
                "bias length {} does not match {} output channels",
                self.bias.len(),
                self.out_channels()
            )));
        }
        Ok(())
    }

    pub fn kh(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kw(&self) -> usize {
        self.weight.shape().h
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().w
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            KernelKind::Depthwise => self.weight.shape().w,
            _ => self.weight.shape().c,
        }
    }

    /// Kernel elements plus bias elements.
    pub fn param_count(&self) -> usize {
        self.weight.shape().len() + self.bias.len()
    }

    /// Number of inputs feeding one output, used for initialization bounds.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            KernelKind::Depthwise => self.kh() * self.kw(),
            // each output sees only every stride-th tap along each axis
            KernelKind::Transpose => {
                let s = self.stride.max(1);
                (self.kh().div_ceil(s) * self.kw().div_ceil(s) * self.in_channels()).max(1)
            }
            _ => self.kh() * self.kw() * self.in_channels(),
        }
    }
}

fn check_channels<T: Scalar>(input: &Tensor4<T>, kernel: &ConvKernel<T>) -> Result<()> {
    kernel.validate()?;
    if kernel.in_channels() != input.shape().c {
        return Err(shape_err(format!(
            "kernel expects {} input channels, input {} has {}",
            kernel.in_channels(),
            input.shape(),
            input.shape().c
        )));
    }
    Ok(())
}

/// Dilated same-padded convolution at stride 1.
pub fn conv2d<T: Scalar>(input: &Tensor4<T>, kernel: &ConvKernel<T>, dilation: usize) -> Result<Tensor4<T>> {
    if dilation == 0 {
        return Err(arg_err("dilation must be >= 1"));
    }
    if kernel.kind == KernelKind::Depthwise {
        return Err(arg_err("conv2d cannot apply a depthwise kernel"));
    }
    check_channels(input, kernel)?;
    Ok(conv::conv2d_forward(input, &kernel.weight, &kernel.bias, dilation))
}

/// Per-channel 3x3 (or any odd size) filter; no mixing between channels.
pub fn depthwise_conv2d<T: Scalar>(input: &Tensor4<T>, kernel: &ConvKernel<T>) -> Result<Tensor4<T>> {
    if kernel.kind != KernelKind::Depthwise || kernel.weight.shape().c != 1 {
        return Err(arg_err(format!(
            "depthwise_conv2d needs a (kh, kw, c, 1) depthwise kernel, got {:?} {}",
            kernel.kind,
            kernel.weight.shape()
        )));
    }
    check_channels(input, kernel)?;
    Ok(conv::depthwise_forward(input, &kernel.weight, &kernel.bias))
}

/// 1x1 convolution: a per-pixel matrix multiply across channels.
pub fn pointwise_conv2d<T: Scalar>(input: &Tensor4<T>, kernel: &ConvKernel<T>) -> Result<Tensor4<T>> {
    if kernel.kh() != 1 || kernel.kw() != 1 || kernel.kind == KernelKind::Depthwise {
        return Err(arg_err(format!(
            "pointwise_conv2d needs a 1x1 kernel, got {}",
            kernel.weight.shape()
        )));
    }
    check_channels(input, kernel)?;
    Ok(conv::conv2d_forward(input, &kernel.weight, &kernel.bias, 1))
}

/// Learnable upsampling by `stride`; output is exactly `stride * h` by `stride * w`.
pub fn transpose_conv2d<T: Scalar>(input: &Tensor4<T>, kernel: &ConvKernel<T>, stride: usize) -> Result<Tensor4<T>> {
    if stride == 0 {
        return Err(arg_err("stride must be >= 1"));
    }
    if kernel.kind == KernelKind::Depthwise {
        return Err(arg_err("transpose_conv2d cannot apply a depthwise kernel"));
    }
    check_channels(input, kernel)?;
    Ok(conv::transpose_forward(input, &kernel.weight, &kernel.bias, stride))
}

pub fn upsample_nearest<T: Scalar>(input: &Tensor4<T>, factor: usize) -> Result<Tensor4<T>> {
    if factor == 0 {
        return Err(arg_err("upsample factor must be >= 1"));
    }
    Ok(conv::upsample_forward(input, factor))
}

pub fn relu<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Concatenate along channels in argument order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = inputs.first().ok_or_else(|| arg_err("concat needs at least one input"))?;
    let s = first.shape();
    for t in inputs {
        let ts = t.shape();
        if (ts.n, ts.h, ts.w) != (s.n, s.h, s.w) {
            return Err(shape_err(format!("cannot concat {ts} with {s}")));
        }
    }
    let c: usize = inputs.iter().map(|t| t.shape().c).sum();
    let pixels = s.n * s.h * s.w;
    let mut data = Vec::with_capacity(pixels * c);
    for p in 0..pixels {
        for t in inputs {
            let tc = t.shape().c;
            data.extend_from_slice(&t.data()[p * tc..(p + 1) * tc]);
        }
    }
    Tensor4::from_vec(Shape4 { c, ..s }, data)
}

pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("cannot add {} and {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor4::from_vec(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape4) -> Tensor4<f64> {
        Tensor4::full(shape, 1.0).unwrap()
    }

    fn standard(kh: usize, ci: usize, co: usize, value: f64) -> ConvKernel<f64> {
        ConvKernel::standard(ones(Shape4::new(kh, kh, ci, co)).map(|_| value), vec![0.0; co], 1).unwrap()
    }

    #[test]
    fn ones_kernel_counts_taps() {
        let x = ones(Shape4::new(1, 3, 3, 1));
        let y = conv2d(&x, &standard(3, 1, 1, 1.0), 1).unwrap();
        assert_eq!(y.at(0, 1, 1, 0), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 1, 0), 6.0);
    }

    #[test]
    fn dilated_delta_hits_nine_positions() {
        let mut x = Tensor4::zeros(Shape4::new(1, 5, 5, 1)).unwrap();
        x.set(0, 2, 2, 0, 1.0);
        let y = conv2d(&x, &standard(3, 1, 1, 1.0), 2).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let hit = i % 2 == 0 && j % 2 == 0;
                assert_eq!(y.at(0, i, j, 0), if hit { 1.0 } else { 0.0 }, "({i},{j})");
            }
        }
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor4::from_fn(Shape4::new(2, 4, 3, 2), |n, i, j, c| (n + i * j + c) as f64).unwrap();
        let mut k = standard(3, 2, 3, 0.0);
        k.bias = vec![0.5, -1.0, 2.0];
        let y = conv2d(&x, &k, 3).unwrap();
        for px in y.data().chunks(3) {
            assert_eq!(px, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn conv_argument_errors() {
        let x = ones(Shape4::new(1, 3, 3, 2));
        assert!(matches!(conv2d(&x, &standard(3, 1, 1, 1.0), 1), Err(crate::Error::Shape(_))));
        assert!(matches!(conv2d(&x, &standard(3, 2, 1, 1.0), 0), Err(crate::Error::Argument(_))));
        let pw = standard(3, 2, 2, 1.0);
        assert!(matches!(pointwise_conv2d(&x, &pw), Err(crate::Error::Argument(_))));
        assert!(matches!(depthwise_conv2d(&x, &pw), Err(crate::Error::Argument(_))));
        let tk = ConvKernel::transpose(ones(Shape4::new(2, 2, 2, 1)), vec![0.0], 2).unwrap();
        assert!(matches!(transpose_conv2d(&x, &tk, 0), Err(crate::Error::Argument(_))));
        assert!(matches!(upsample_nearest(&x, 0), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn depthwise_does_not_mix_channels() {
        let x = Tensor4::from_fn(Shape4::new(1, 3, 3, 2), |_, _, _, c| if c == 0 { 1.0 } else { 0.0 }).unwrap();
        let k = ConvKernel::depthwise(ones(Shape4::new(3, 3, 2, 1)), vec![0.0; 2]).unwrap();
        let y = depthwise_conv2d(&x, &k).unwrap();
        assert_eq!(y.at(0, 1, 1, 0), 9.0);
        assert!(y.data().chunks(2).all(|px| px[1] == 0.0));
    }

    #[test]
    fn pointwise_is_dot_product_and_identity() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![2.0, 3.0]).unwrap();
        let k = ConvKernel::pointwise(ones(Shape4::new(1, 1, 2, 1)), vec![0.0]).unwrap();
        assert_eq!(pointwise_conv2d(&x, &k).unwrap().data(), &[5.0]);

        let x = Tensor4::from_fn(Shape4::new(1, 2, 3, 3), |_, i, j, c| (i * 7 + j * 3 + c) as f64 - 4.0).unwrap();
        let eye = Tensor4::from_fn(Shape4::new(1, 1, 3, 3), |_, _, a, b| if a == b { 1.0 } else { 0.0 }).unwrap();
        let k = ConvKernel::pointwise(eye, vec![0.0; 3]).unwrap();
        assert_eq!(pointwise_conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn transpose_scatters_tiles() {
        let x = Tensor4::scalar(2.5);
        let k = ConvKernel::transpose(ones(Shape4::new(2, 2, 1, 1)), vec![0.0], 2).unwrap();
        let y = transpose_conv2d(&x, &k, 2).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 2, 2, 1));
        assert!(y.data().iter().all(|&v| v == 2.5));

        let y = transpose_conv2d(&ones(Shape4::new(1, 2, 2, 1)), &k, 2).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 4, 4, 1));
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transpose_shape_law() {
        for (k, s) in [(4, 2), (3, 2), (2, 2), (6, 3), (1, 1), (3, 1)] {
            let x = ones(Shape4::new(2, 3, 5, 2));
            let kern = ConvKernel::transpose(ones(Shape4::new(k, k, 2, 3)), vec![0.0; 3], s).unwrap();
            let y = transpose_conv2d(&x, &kern, s).unwrap();
            assert_eq!(y.shape(), Shape4::new(2, 3 * s, 5 * s, 3));
        }
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor4::from_vec(Shape4::new(1, 2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        let expect = [
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        let y = upsample_nearest(&Tensor4::scalar(7.0), 3).unwrap();
        assert_eq!(y.data(), &[7.0; 9]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor4::vector(vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor4::vector(vec![-3.0, -0.5]).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor4::vector(vec![0.0, 0.5, 9.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn concat_orders_and_round_trips() {
        let parts: Vec<Tensor4<f64>> = (0..3)
            .map(|k| Tensor4::from_fn(Shape4::new(1, 2, 2, 4), |_, i, j, c| (k * 100 + i * 10 + j + c) as f64).unwrap())
            .collect();
        let refs: Vec<&Tensor4<f64>> = parts.iter().collect();
        let cat = concat_channels(&refs).unwrap();
        assert_eq!(cat.shape(), Shape4::new(1, 2, 2, 12));
        for (k, p) in parts.iter().enumerate() {
            assert_eq!(&cat.slice_channels(4 * k, 4).unwrap(), p);
        }
        let bad = ones(Shape4::new(1, 3, 2, 1));
        assert!(matches!(concat_channels(&[&parts[0], &bad]), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn add_identities() {
        let a = Tensor4::from_fn(Shape4::new(1, 2, 3, 2), |_, i, j, c| (i as f64) - (j * c) as f64 * 0.3).unwrap();
        let zero = Tensor4::zeros(a.shape()).unwrap();
        assert_eq!(add(&a, &zero).unwrap(), a);
        assert!(add(&a, &a.map(|v| -v)).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(add(&a, &ones(Shape4::new(1, 2, 3, 1))), Err(crate::Error::Shape(_))));
    }
}
