//! Composite reconstruction loss: pixel MSE, spectral angle, and per-pixel
//! squared spectral error.
//!
//! Spectra are the channel vectors of each pixel; `N` is the number of
//! pixels (`n * h * w`) and `B` the number of channels.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor4};

/// Clamp margin applied to the cosine before `acos` in the training loss.
pub const SAM_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the spectral-angle term.
    pub lambda1: f64,
    /// Weight of the per-pixel squared-error term.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.03,
        }
    }
}

impl LossWeights {
    /// Plain MSE (both extra terms disabled).
    pub fn mse_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(arg_err(format!(
                "loss weights must be >= 0, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(y_true: &Tensor4<T>, y_pred: &Tensor4<T>) -> Result<()> {
    if y_true.shape() != y_pred.shape() {
        return Err(shape_err(format!(
            "loss inputs differ in shape: {} vs {}",
            y_true.shape(),
            y_pred.shape()
        )));
    }
    Ok(())
}

fn sum_sq_diff<T: Scalar>(y_true: &Tensor4<T>, y_pred: &Tensor4<T>) -> T {
    y_true
        .data()
        .iter()
        .zip(y_pred.data())
        .fold(T::zero(), |acc, (&t, &p)| acc + (p - t) * (p - t))
}

fn pixels<T: Scalar>(t: &Tensor4<T>) -> usize {
    let s = t.shape();
    s.n * s.h * s.w
}

/// Mean of squared differences over all elements.
pub fn loss_mse<T: Scalar>(y_true: &Tensor4<T>, y_pred: &Tensor4<T>) -> Result<T> {
    check_pair(y_true, y_pred)?;
    Ok(sum_sq_diff(y_true, y_pred) / T::lit(y_true.shape().len() as f64))
}

/// Mean over pixels of the squared Euclidean norm of the spectral error.
///
/// Equal to `B * loss_mse`; computed that way so the identity holds bit
/// for bit.
pub fn loss_l2<T: Scalar>(y_true: &Tensor4<T>, y_pred: &Tensor4<T>) -> Result<T> {
    Ok(T::lit(y_true.shape().c as f64) * loss_mse(y_true, y_pred)?)
}

/// Cosine between two spectra, or `None` when either has zero norm.
pub(crate) fn spectral_cosine<T: Scalar>(t: &[T], p: &[T]) -> Option<(T, T, T)> {
    let (mut dot, mut tt, mut pp) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in t.iter().zip(p) {
        dot += a * b;
        tt += a * a;
        pp += b * b;
    }
    let (nt, np) = (tt.sqrt(), pp.sqrt());
    if nt == T::zero() || np == T::zero() {
        return None;
    }
    Some((dot / (nt * np), nt, np))
}

/// Mean spectral angle in radians, cosine clamped to `[-1 + eps, 1 - eps]`.
/// Zero-norm spectra contribute 0 but still count towards `N`.
pub fn loss_sam<T: Scalar>(y_true: &Tensor4<T>, y_pred: &Tensor4<T>) -> Result<T> {
    check_pair(y_true, y_pred)?;
    let c = y_true.shape().c;
    let eps = T::lit(SAM_EPS);
    let (lo, hi) = (-T::one() + eps, T::one() - eps);
    let total = y_true
        .data()
        .chunks_exact(c)
        .zip(y_pred.data().chunks_exact(c))
        .fold(T::zero(), |acc, (t, p)| match spectral_cosine(t, p) {
            Some((cos, _, _)) => acc + cos.max(lo).min(hi).acos(),
            None => acc,
        });
    Ok(total / T::lit(pixels(y_true) as f64))
}

pub fn loss_total<T: Scalar>(y_true: &Tensor4<T>, y_pred: &Tensor4<T>, w: &LossWeights) -> Result<T> {
    w.validate()?;
    let mut total = loss_mse(y_true, y_pred)?;
    if w.lambda1 != 0.0 {
        total += T::lit(w.lambda1) * loss_sam(y_true, y_pred)?;
    }
    if w.lambda2 != 0.0 {
        total += T::lit(w.lambda2) * loss_l2(y_true, y_pred)?;
    }
    Ok(total)
}

/// Gradient of [`loss_total`] with respect to `y_pred`.
pub fn loss_total_grad<T: Scalar>(y_true: &Tensor4<T>, y_pred: &Tensor4<T>, w: &LossWeights) -> Result<Vec<T>> {
    check_pair(y_true, y_pred)?;
    w.validate()?;
    let s = y_true.shape();
    let n_px = T::lit(pixels(y_true) as f64);
    let n_el = T::lit(s.len() as f64);
    let two = T::lit(2.0);
    // d/dp of mse + lambda2 * l2 is the same direction with combined scale
    let sq_scale = two / n_el + T::lit(w.lambda2) * two / n_px;
    let mut grad: Vec<T> = y_true
        .data()
        .iter()
        .zip(y_pred.data())
        .map(|(&t, &p)| (p - t) * sq_scale)
        .collect();

    if w.lambda1 != 0.0 {
        let l1 = T::lit(w.lambda1);
        let eps = T::lit(SAM_EPS);
        let (lo, hi) = (-T::one() + eps, T::one() - eps);
        for ((t, p), g) in y_true
            .data()
            .chunks_exact(s.c)
            .zip(y_pred.data().chunks_exact(s.c))
            .zip(grad.chunks_exact_mut(s.c))
        {
            let Some((cos, nt, np)) = spectral_cosine(t, p) else { continue };
            if cos <= lo || cos >= hi {
                continue;
            }
            // d acos(cos)/dp = -(t / (|t||p|) - cos * p / |p|^2) / sqrt(1 - cos^2)
            let outer = -l1 / ((T::one() - cos * cos).sqrt() * n_px);
            let inv_tp = T::one() / (nt * np);
            let inv_pp = cos / (np * np);
            for ((gi, &ti), &pi) in g.iter_mut().zip(t).zip(p) {
                *gi += outer * (ti * inv_tp - pi * inv_pp);
            }
        }
    }
    Ok(grad)
}
