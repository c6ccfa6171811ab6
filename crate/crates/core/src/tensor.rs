//! Dense NHWC tensors.
//!
//! [`Tensor4`] is the single numeric carrier used throughout the crate:
//! feature maps are `(n, h, w, c)` and convolution kernels reuse the same
//! type with the axes read as `(kh, kw, c_in, c_out)`. Storage is row-major
//! so the channel axis is contiguous, which keeps pointwise convolutions
//! as straight inner products.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};

/// On-disk element type. The discriminant is the byte width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(DType::F32),
            8 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        self.tag() as usize
    }
}

/// Floating-point element type usable by the engine (`f32` or `f64`).
pub trait Scalar:
    Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Append `values` to `out` as little-endian bytes of the given dtype.
pub fn write_le<T: Scalar>(values: &[T], dtype: DType, out: &mut Vec<u8>) {
    out.reserve(values.len() * dtype.size());
    match dtype {
        DType::F32 => {
            for v in values {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for v in values {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
}

/// Decode little-endian bytes of the given dtype. `bytes.len()` must be a
/// multiple of the dtype size.
pub fn read_le<T: Scalar>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|b| {
                let mut a = [0u8; 8];
                a.copy_from_slice(b);
                T::lit(f64::from_le_bytes(a))
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape4 {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c }
    }

    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    #[inline]
    pub fn index(&self, n: usize, i: usize, j: usize, c: usize) -> usize {
        ((n * self.h + i) * self.w + j) * self.c + c
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

/// A batched `(n, h, w, c)` array with optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape4, value: T) -> Result<Self> {
        check_dims(shape)?;
        Ok(Self {
            shape,
            data: vec![value; shape.len()],
            grad: None,
        })
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        check_dims(shape)?;
        if data.len() != shape.len() {
            return Err(shape_err(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        check_dims(shape)?;
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for i in 0..shape.h {
                for j in 0..shape.w {
                    for c in 0..shape.c {
                        data.push(f(n, i, j, c));
                    }
                }
            }
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// A `(1, 1, 1, len)` tensor, used for bias vectors and scalars.
    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::from_vec(Shape4::new(1, 1, 1, data.len()), data)
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Shape4::new(1, 1, 1, 1),
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(shape_err(format!(
                "gradient length {} does not match tensor {}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize, j: usize, c: usize) -> T {
        self.data[self.shape.index(n, i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, i: usize, j: usize, c: usize, v: T) {
        let idx = self.shape.index(n, i, j, c);
        self.data[idx] = v;
    }

    /// Contiguous channel vector at one pixel.
    #[inline]
    pub fn pixel(&self, n: usize, i: usize, j: usize) -> &[T] {
        let start = self.shape.index(n, i, j, 0);
        &self.data[start..start + self.shape.c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    /// Copy channels `[start, start + len)` into a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.c {
            return Err(arg_err(format!(
                "channel slice [{start}, {}) out of range for {} channels",
                start + len,
                self.shape.c
            )));
        }
        let c = self.shape.c;
        let data = self
            .data
            .chunks_exact(c)
            .flat_map(|px| px[start..start + len].iter().copied())
            .collect();
        Self::from_vec(Shape4 { c: len, ..self.shape }, data)
    }

    /// Select one sample of the batch as an `n = 1` tensor.
    pub fn sample(&self, n: usize) -> Result<Self> {
        if n >= self.shape.n {
            return Err(arg_err(format!("sample {n} out of range for batch {}", self.shape.n)));
        }
        let per = self.shape.h * self.shape.w * self.shape.c;
        Self::from_vec(
            Shape4 { n: 1, ..self.shape },
            self.data[n * per..(n + 1) * per].to_vec(),
        )
    }

    /// Stack `n = 1` (or larger) tensors of identical `(h, w, c)` along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| arg_err("cannot stack an empty list of tensors"))?;
        let s = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if (t.shape.h, t.shape.w, t.shape.c) != (s.h, s.w, s.c) {
                return Err(shape_err(format!("cannot stack {} with {}", t.shape, s)));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Self::from_vec(Shape4 { n, ..s }, data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_dims(shape: Shape4) -> Result<()> {
    if shape.n == 0 || shape.h == 0 || shape.w == 0 || shape.c == 0 {
        return Err(shape_err(format!("all dimensions must be >= 1, got {shape}")));
    }
    shape
        .n
        .checked_mul(shape.h)
        .and_then(|v| v.checked_mul(shape.w))
        .and_then(|v| v.checked_mul(shape.c))
        .ok_or_else(|| shape_err(format!("shape {shape} overflows")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dims_are_rejected() {
        assert!(Tensor4::<f64>::zeros(Shape4::new(1, 0, 2, 2)).is_err());
        assert!(Tensor4::<f64>::from_vec(Shape4::new(1, 1, 1, 2), vec![1.0]).is_err());
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor4::<f64>::zeros(Shape4::new(1, 2, 2, 1)).unwrap();
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0; 4][..]));
    }

    #[test]
    fn slice_and_stack() {
        let t = Tensor4::<f64>::from_fn(Shape4::new(2, 2, 2, 3), |n, i, j, c| {
            (n * 100 + i * 10 + j) as f64 + c as f64 * 0.1
        })
        .unwrap();
        let s = t.slice_channels(1, 2).unwrap();
        assert_eq!(s.shape(), Shape4::new(2, 2, 2, 2));
        assert_eq!(s.at(1, 1, 0, 0), t.at(1, 1, 0, 1));
        let back = Tensor4::stack(&[t.sample(0).unwrap(), t.sample(1).unwrap()]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn le_codec_round_trips() {
        let v = vec![1.5f64, -0.0, f64::MIN_POSITIVE, 1e300];
        let mut bytes = Vec::new();
        write_le(&v, DType::F64, &mut bytes);
        assert_eq!(read_le::<f64>(&bytes, DType::F64), v);
    }
}
