//! Shared fixtures and the finite-difference gradient checker.
#![allow(dead_code)]

use dsdcn_core::data::HsiCube;
use dsdcn_core::ops::{ConvKernel, KernelKind};
use dsdcn_core::tape::{BoundKernel, Tape, Var};
use dsdcn_core::{Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Tensor4<f64> {
    Tensor4::from_fn(Shape4::new(n, h, w, c), |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn rand_kernel(
    rng: &mut ChaCha8Rng,
    kind: KernelKind,
    k: usize,
    c_in: usize,
    c_out: usize,
) -> ConvKernel<f64> {
    let mut kernel = ConvKernel::<f64>::zeros(kind, k, k, c_in, c_out).unwrap();
    for w in kernel.weight.data_mut() {
        *w = rng.gen_range(-1.0..1.0);
    }
    for b in &mut kernel.bias {
        *b = rng.gen_range(-0.5..0.5);
    }
    kernel
}

/// Weight and bias of `k` as separate tensors, for checks that perturb them.
pub fn kernel_tensors(k: &ConvKernel<f64>) -> [Tensor4<f64>; 2] {
    [k.weight.clone(), Tensor4::vector(k.bias.clone()).unwrap()]
}

pub fn bind(k: &ConvKernel<f64>, weight: Var, bias: Var) -> BoundKernel {
    BoundKernel {
        kind: k.kind,
        weight,
        bias,
        dilation: k.dilation,
        stride: k.stride,
    }
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; 0 when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compare tape gradients with central differences for every input marked
/// trainable. Non-scalar outputs are reduced with fixed random weights so
/// every output element matters. Returns one relative error per trainable
/// input, in order.
pub fn grad_check<F>(inputs: &[Tensor4<f64>], trainable: &[bool], f: F) -> Vec<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    assert_eq!(inputs.len(), trainable.len());
    let build = |vals: &[Tensor4<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(trainable)
            .map(|(v, &t)| if t { tape.param(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };

    let (probe, _, out) = build(inputs);
    let shape = probe.value(out).shape();
    let weights = (shape.len() > 1).then(|| rand_tensor(&mut rng(0xfeed), shape.n, shape.h, shape.w, shape.c));
    let reduce = |tape: &mut Tape<f64>, out: Var| match &weights {
        Some(w) => tape.weighted_sum(out, w.clone()).unwrap(),
        None => out,
    };
    let loss_at = |vals: &[Tensor4<f64>]| {
        let (mut tape, _, out) = build(vals);
        let root = reduce(&mut tape, out);
        tape.value(root).data()[0]
    };

    let (mut tape, vars, out) = build(inputs);
    let root = reduce(&mut tape, out);
    tape.backward(root).unwrap();

    let mut errors = Vec::new();
    for (i, &t) in trainable.iter().enumerate() {
        if !t {
            continue;
        }
        let analytic = tape.grad(vars[i]).expect("trainable input has a gradient").to_vec();
        let mut vals = inputs.to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let orig = vals[i].data()[k];
            vals[i].data_mut()[k] = orig + FD_STEP;
            let plus = loss_at(&vals);
            vals[i].data_mut()[k] = orig - FD_STEP;
            let minus = loss_at(&vals);
            vals[i].data_mut()[k] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        errors.push(rel_error(&analytic, &numeric));
    }
    errors
}

/// Smooth synthetic scene: three endmember spectra mixed by slowly varying
/// abundances, values roughly in `[0.1, 0.6]`.
pub fn synthetic_cube(h: usize, w: usize, b: usize) -> HsiCube {
    let ends: Vec<Vec<f64>> = (0..3)
        .map(|e| {
            (0..b)
                .map(|k| {
                    let t = k as f64 / b as f64;
                    0.3 + 0.25 * ((e as f64 + 1.0) * 2.1 * t + e as f64).sin()
                })
                .collect()
        })
        .collect();
    HsiCube::from_fn(h, w, b, |i, j, k| {
        let (x, y) = (i as f64 / h as f64, j as f64 / w as f64);
        let a = [
            1.0 + (3.0 * x).sin() * (2.0 * y).cos(),
            1.0 + (2.5 * y + 1.0).sin(),
            1.0 + (4.0 * x * y).cos(),
        ];
        let s: f64 = a.iter().sum();
        (0..3).map(|e| a[e] / s * ends[e][k]).sum()
    })
    .unwrap()
}

pub fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `K` with its input and output channel axes exchanged, biases zero.
pub fn swap_channels(k: &ConvKernel<f64>, kind: KernelKind, stride: usize) -> ConvKernel<f64> {
    let s = k.weight.shape();
    let w = Tensor4::from_fn(Shape4::new(s.n, s.h, s.c, s.w), |a, b, co, ci| k.weight.at(a, b, ci, co)).unwrap();
    let mut out = ConvKernel::zeros(kind, s.n, s.h, s.c, s.w).unwrap();
    out.weight = w;
    out.stride = stride;
    out
}

/// Strided correlation used only as the adjoint oracle for the transpose:
/// `y[i, j] = sum x[i s + a - pad, j s + b - pad] K[a, b]`, zero outside.
pub fn strided_conv(x: &Tensor4<f64>, k: &ConvKernel<f64>, stride: usize) -> Tensor4<f64> {
    let xs = x.shape();
    let ks = k.weight.shape();
    let pad = ks.n.saturating_sub(stride) / 2;
    let (oh, ow) = (xs.h / stride, xs.w / stride);
    Tensor4::from_fn(Shape4::new(xs.n, oh, ow, ks.c), |n, i, j, co| {
        let mut acc = 0.0;
        for a in 0..ks.n {
            for b in 0..ks.h {
                let (r, c) = ((i * stride + a) as isize - pad as isize, (j * stride + b) as isize - pad as isize);
                if r < 0 || c < 0 || r >= xs.h as isize || c >= xs.w as isize {
                    continue;
                }
                for ci in 0..ks.w {
                    acc += x.at(n, r as usize, c as usize, ci) * k.weight.at(a, b, ci, co);
                }
            }
        }
        acc
    })
    .unwrap()
}

/// SSIM written the long way: for every window position, build the 2-D
/// Gaussian weights explicitly and take weighted means, variances and the
/// covariance directly from the definitions.
pub fn straight_line_ssim(x: &[f64], y: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let (size, sigma) = (11usize, 1.5f64);
    let centre = (size as f64 - 1.0) / 2.0;
    let mut weights = vec![0.0; size * size];
    for a in 0..size {
        for b in 0..size {
            let (da, db) = (a as f64 - centre, b as f64 - centre);
            weights[a * size + b] = (-(da * da + db * db) / (2.0 * sigma * sigma)).exp();
        }
    }
    let norm: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= norm);

    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - size {
        for j in 0..=w - size {
            let at = |img: &[f64], a: usize, b: usize| img[(i + a) * w + j + b];
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..size {
                for b in 0..size {
                    let g = weights[a * size + b];
                    mx += g * at(x, a, b);
                    my += g * at(y, a, b);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for a in 0..size {
                for b in 0..size {
                    let g = weights[a * size + b];
                    let (dx, dy) = (at(x, a, b) - mx, at(y, a, b) - my);
                    vx += g * dx * dx;
                    vy += g * dy * dy;
                    cov += g * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}
