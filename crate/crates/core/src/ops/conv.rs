//! Raw convolution kernels on NHWC slices.
//!
//! Forward passes and input gradients are written in gather form so every
//! output row is independent and can be filled in parallel. Weight
//! gradients are reduced over a fixed number of row chunks and summed in
//! order, which keeps results bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::tensor::{Scalar, Shape4, Tensor4};

/// Fixed reduction fan-out for weight gradients.
const REDUCE_CHUNKS: usize = 16;

#[inline]
fn offset(base: usize, tap: usize, pad: usize, limit: usize) -> Option<usize> {
    let pos = (base + tap).checked_sub(pad)?;
    (pos < limit).then_some(pos)
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [T], a: T, x: &[T]) {
    for (y, &x) in acc.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Sum `len`-element partials produced over `rows` in fixed chunks.
pub(crate) fn chunked_reduce<T, F>(rows: usize, len: usize, f: F) -> Vec<T>
where
    T: Scalar,
    F: Fn(std::ops::Range<usize>, &mut [T]) + Sync,
{
    let per = rows.div_ceil(REDUCE_CHUNKS).max(1);
    let starts: Vec<usize> = (0..rows).step_by(per).collect();
    let partials: Vec<Vec<T>> = starts
        .into_par_iter()
        .map(|start| {
            let mut acc = vec![T::zero(); len];
            f(start..(start + per).min(rows), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![T::zero(); len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

pub(crate) fn bias_grad<T: Scalar>(grad_out: &Tensor4<T>) -> Vec<T> {
    let c = grad_out.shape().c;
    let mut gb = vec![T::zero(); c];
    for px in grad_out.data().chunks_exact(c) {
        for (b, &g) in gb.iter_mut().zip(px) {
            *b += g;
        }
    }
    gb
}

/// Same-padded stride-1 convolution. `w` is `(kh, kw, c_in, c_out)`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &[T],
    dilation: usize,
) -> Tensor4<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (kh, kw, ci, co) = (ws.n, ws.h, ws.w, ws.c);
    let ph = dilation * (kh - 1) / 2;
    let pw = dilation * (kw - 1) / 2;
    let out_shape = Shape4::new(xs.n, xs.h, xs.w, co);
    let mut out = vec![T::zero(); out_shape.len()];
    let wd = w.data();
    out.par_chunks_mut(xs.w * co).enumerate().for_each(|(row, chunk)| {
        let (n, i) = (row / xs.h, row % xs.h);
        for j in 0..xs.w {
            let acc = &mut chunk[j * co..(j + 1) * co];
            acc.copy_from_slice(b);
            for ki in 0..kh {
                let Some(ii) = offset(i, ki * dilation, ph, xs.h) else { continue };
                for kj in 0..kw {
                    let Some(jj) = offset(j, kj * dilation, pw, xs.w) else { continue };
                    let px = x.pixel(n, ii, jj);
                    let base = (ki * kw + kj) * ci * co;
                    for (c, &xv) in px.iter().enumerate() {
                        axpy(acc, xv, &wd[base + c * co..base + (c + 1) * co]);
                    }
                }
            }
        }
    });
    Tensor4::from_vec(out_shape, out).expect("conv2d output shape")
}

/// Returns `(grad_input, grad_weight)`; the bias gradient is [`bias_grad`].
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    g: &Tensor4<T>,
    dilation: usize,
) -> (Vec<T>, Vec<T>) {
    let xs = x.shape();
    let ws = w.shape();
    let (kh, kw, ci, co) = (ws.n, ws.h, ws.w, ws.c);
    let ph = dilation * (kh - 1) / 2;
    let pw = dilation * (kw - 1) / 2;
    let wd = w.data();

    let mut gx = vec![T::zero(); xs.len()];
    gx.par_chunks_mut(xs.w * ci).enumerate().for_each(|(row, chunk)| {
        let (n, ii) = (row / xs.h, row % xs.h);
        for jj in 0..xs.w {
            let acc = &mut chunk[jj * ci..(jj + 1) * ci];
            for ki in 0..kh {
                // output row i reads input row ii when i + ki*d - ph == ii
                let Some(i) = offset(ii, ph, ki * dilation, xs.h) else { continue };
                for kj in 0..kw {
                    let Some(j) = offset(jj, pw, kj * dilation, xs.w) else { continue };
                    let gp = g.pixel(n, i, j);
                    let base = (ki * kw + kj) * ci * co;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += dot(gp, &wd[base + c * co..base + (c + 1) * co]);
                    }
                }
            }
        }
    });

    let gw = chunked_reduce(xs.n * xs.h, ws.len(), |rows, acc: &mut [T]| {
        for row in rows {
            let (n, i) = (row / xs.h, row % xs.h);
            for j in 0..xs.w {
                let gp = g.pixel(n, i, j);
                for ki in 0..kh {
                    let Some(ii) = offset(i, ki * dilation, ph, xs.h) else { continue };
                    for kj in 0..kw {
                        let Some(jj) = offset(j, kj * dilation, pw, xs.w) else { continue };
                        let px = x.pixel(n, ii, jj);
                        let base = (ki * kw + kj) * ci * co;
                        for (c, &xv) in px.iter().enumerate() {
                            axpy(&mut acc[base + c * co..base + (c + 1) * co], xv, gp);
                        }
                    }
                }
            }
        }
    });
    (gx, gw)
}

/// Same-padded per-channel convolution. `w` is `(kh, kw, c, 1)`.
pub(crate) fn depthwise_forward<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, b: &[T]) -> Tensor4<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (kh, kw, c) = (ws.n, ws.h, ws.w);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = vec![T::zero(); xs.len()];
    let wd = w.data();
    out.par_chunks_mut(xs.w * c).enumerate().for_each(|(row, chunk)| {
        let (n, i) = (row / xs.h, row % xs.h);
        for j in 0..xs.w {
            let acc = &mut chunk[j * c..(j + 1) * c];
            acc.copy_from_slice(b);
            for ki in 0..kh {
                let Some(ii) = offset(i, ki, ph, xs.h) else { continue };
                for kj in 0..kw {
                    let Some(jj) = offset(j, kj, pw, xs.w) else { continue };
                    let px = x.pixel(n, ii, jj);
                    let taps = &wd[(ki * kw + kj) * c..(ki * kw + kj + 1) * c];
                    for ((a, &xv), &t) in acc.iter_mut().zip(px).zip(taps) {
                        *a += xv * t;
                    }
                }
            }
        }
    });
    Tensor4::from_vec(xs, out).expect("depthwise output shape")
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    g: &Tensor4<T>,
) -> (Vec<T>, Vec<T>) {
    let xs = x.shape();
    let ws = w.shape();
    let (kh, kw, c) = (ws.n, ws.h, ws.w);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let wd = w.data();

    let mut gx = vec![T::zero(); xs.len()];
    gx.par_chunks_mut(xs.w * c).enumerate().for_each(|(row, chunk)| {
        let (n, ii) = (row / xs.h, row % xs.h);
        for jj in 0..xs.w {
            let acc = &mut chunk[jj * c..(jj + 1) * c];
            for ki in 0..kh {
                let Some(i) = offset(ii, ph, ki, xs.h) else { continue };
                for kj in 0..kw {
                    let Some(j) = offset(jj, pw, kj, xs.w) else { continue };
                    let gp = g.pixel(n, i, j);
                    let taps = &wd[(ki * kw + kj) * c..(ki * kw + kj + 1) * c];
                    for ((a, &gv), &t) in acc.iter_mut().zip(gp).zip(taps) {
                        *a += gv * t;
                    }
                }
            }
        }
    });

    let gw = chunked_reduce(xs.n * xs.h, ws.len(), |rows, acc: &mut [T]| {
        for row in rows {
            let (n, i) = (row / xs.h, row % xs.h);
            for j in 0..xs.w {
                let gp = g.pixel(n, i, j);
                for ki in 0..kh {
                    let Some(ii) = offset(i, ki, ph, xs.h) else { continue };
                    for kj in 0..kw {
                        let Some(jj) = offset(j, kj, pw, xs.w) else { continue };
                        let px = x.pixel(n, ii, jj);
                        let taps = &mut acc[(ki * kw + kj) * c..(ki * kw + kj + 1) * c];
                        for ((a, &xv), &gv) in taps.iter_mut().zip(px).zip(gp) {
                            *a += xv * gv;
                        }
                    }
                }
            }
        }
    });
    (gx, gw)
}

/// Leading crop of a transpose convolution whose output is exactly
/// `stride * input`. The full output `(h - 1) * s + k` is trimmed by
/// `k - s`, split as evenly as possible with the extra row at the end.
#[inline]
pub(crate) fn transpose_pad(kernel: usize, stride: usize) -> usize {
    kernel.saturating_sub(stride) / 2
}

/// Transpose convolution with stride `s`; `w` is `(k, k, c_in, c_out)`
/// and the output is `(n, s*h, s*w, c_out)`.
pub(crate) fn transpose_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &[T],
    stride: usize,
) -> Tensor4<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (kh, kw, ci, co) = (ws.n, ws.h, ws.w, ws.c);
    let (ph, pw) = (transpose_pad(kh, stride), transpose_pad(kw, stride));
    let (oh, ow) = (xs.h * stride, xs.w * stride);
    let out_shape = Shape4::new(xs.n, oh, ow, co);
    let mut out = vec![T::zero(); out_shape.len()];
    let wd = w.data();
    out.par_chunks_mut(ow * co).enumerate().for_each(|(row, chunk)| {
        let (n, oi) = (row / oh, row % oh);
        for oj in 0..ow {
            let acc = &mut chunk[oj * co..(oj + 1) * co];
            acc.copy_from_slice(b);
            for ki in 0..kh {
                // oi == i*s + ki - ph
                let Some(t) = (oi + ph).checked_sub(ki) else { continue };
                if t % stride != 0 || t / stride >= xs.h {
                    continue;
                }
                let i = t / stride;
                for kj in 0..kw {
                    let Some(u) = (oj + pw).checked_sub(kj) else { continue };
                    if u % stride != 0 || u / stride >= xs.w {
                        continue;
                    }
                    let px = x.pixel(n, i, u / stride);
                    let base = (ki * kw + kj) * ci * co;
                    for (c, &xv) in px.iter().enumerate() {
                        axpy(acc, xv, &wd[base + c * co..base + (c + 1) * co]);
                    }
                }
            }
        }
    });
    Tensor4::from_vec(out_shape, out).expect("transpose output shape")
}

pub(crate) fn transpose_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    g: &Tensor4<T>,
    stride: usize,
) -> (Vec<T>, Vec<T>) {
    let xs = x.shape();
    let ws = w.shape();
    let (kh, kw, ci, co) = (ws.n, ws.h, ws.w, ws.c);
    let (ph, pw) = (transpose_pad(kh, stride), transpose_pad(kw, stride));
    let (oh, ow) = (xs.h * stride, xs.w * stride);
    let wd = w.data();

    let mut gx = vec![T::zero(); xs.len()];
    gx.par_chunks_mut(xs.w * ci).enumerate().for_each(|(row, chunk)| {
        let (n, i) = (row / xs.h, row % xs.h);
        for j in 0..xs.w {
            let acc = &mut chunk[j * ci..(j + 1) * ci];
            for ki in 0..kh {
                let Some(oi) = offset(i * stride, ki, ph, oh) else { continue };
                for kj in 0..kw {
                    let Some(oj) = offset(j * stride, kj, pw, ow) else { continue };
                    let gp = g.pixel(n, oi, oj);
                    let base = (ki * kw + kj) * ci * co;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += dot(gp, &wd[base + c * co..base + (c + 1) * co]);
                    }
                }
            }
        }
    });

    let gw = chunked_reduce(xs.n * xs.h, ws.len(), |rows, acc: &mut [T]| {
        for row in rows {
            let (n, i) = (row / xs.h, row % xs.h);
            for j in 0..xs.w {
                let px = x.pixel(n, i, j);
                for ki in 0..kh {
                    let Some(oi) = offset(i * stride, ki, ph, oh) else { continue };
                    for kj in 0..kw {
                        let Some(oj) = offset(j * stride, kj, pw, ow) else { continue };
                        let gp = g.pixel(n, oi, oj);
                        let base = (ki * kw + kj) * ci * co;
                        for (c, &xv) in px.iter().enumerate() {
                            axpy(&mut acc[base + c * co..base + (c + 1) * co], xv, gp);
                        }
                    }
                }
            }
        }
    });
    (gx, gw)
}

pub(crate) fn upsample_forward<T: Scalar>(x: &Tensor4<T>, factor: usize) -> Tensor4<T> {
    let xs = x.shape();
    let out_shape = Shape4::new(xs.n, xs.h * factor, xs.w * factor, xs.c);
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..xs.n {
        for oi in 0..out_shape.h {
            for oj in 0..out_shape.w {
                out.extend_from_slice(x.pixel(n, oi / factor, oj / factor));
            }
        }
    }
    Tensor4::from_vec(out_shape, out).expect("upsample output shape")
}

pub(crate) fn upsample_backward<T: Scalar>(in_shape: Shape4, g: &Tensor4<T>, factor: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); in_shape.len()];
    let gs = g.shape();
    let c = in_shape.c;
    for n in 0..gs.n {
        for oi in 0..gs.h {
            for oj in 0..gs.w {
                let base = in_shape.index(n, oi / factor, oj / factor, 0);
                for (a, &v) in gx[base..base + c].iter_mut().zip(g.pixel(n, oi, oj)) {
                    *a += v;
                }
            }
        }
    }
    gx
}
