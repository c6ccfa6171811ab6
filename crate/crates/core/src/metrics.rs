//! Evaluation metrics on full cubes: MPSNR, MSSIM and SAM.

use serde::{Deserialize, Serialize};

use crate::data::HsiCube;
use crate::error::{arg_err, shape_err, Result};

/// PSNR assigned to a band that is reconstructed exactly.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpsnr_db: f64,
    pub mssim: f64,
    pub sam_deg: f64,
}

impl MetricReport {
    pub fn sam_rad(&self) -> f64 {
        self.sam_deg.to_radians()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes")
    }

    pub fn is_finite(&self) -> bool {
        self.mpsnr_db.is_finite() && self.mssim.is_finite() && self.sam_deg.is_finite()
    }
}

fn check_pair(reference: &HsiCube, estimate: &HsiCube) -> Result<()> {
    if reference.dims() != estimate.dims() {
        return Err(shape_err(format!(
            "cubes differ in shape: {:?} vs {:?}",
            reference.dims(),
            estimate.dims()
        )));
    }
    Ok(())
}

/// Mean over bands of `10 log10(peak^2 / mse_band)`, capped at 100 dB.
pub fn metric_mpsnr(reference: &HsiCube, estimate: &HsiCube, peak: f64) -> Result<f64> {
    check_pair(reference, estimate)?;
    if !(peak > 0.0) {
        return Err(arg_err(format!("peak must be > 0, got {peak}")));
    }
    let b = reference.bands();
    let mut sse = vec![0.0; b];
    for (r, e) in reference.data().chunks_exact(b).zip(estimate.data().chunks_exact(b)) {
        for k in 0..b {
            let d = e[k] - r[k];
            sse[k] += d * d;
        }
    }
    let pixels = (reference.height() * reference.width()) as f64;
    let total: f64 = sse
        .iter()
        .map(|&s| {
            let mse = s / pixels;
            if mse == 0.0 {
                PSNR_CAP_DB
            } else {
                (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
            }
        })
        .sum();
    Ok(total / b as f64)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a row-major plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| taps[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| taps[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Single-scale SSIM of one band with a Gaussian window, averaged over all
/// window positions that fit inside the image.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, peak: f64) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(arg_err(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, h, w, &taps);
    let mu_y = filter_valid(y, h, w, &taps);
    let e_xx = filter_valid(&xx, h, w, &taps);
    let e_yy = filter_valid(&yy, h, w, &taps);
    let e_xy = filter_valid(&xy, h, w, &taps);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|p| {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let vx = e_xx[p] - mx * mx;
            let vy = e_yy[p] - my * my;
            let cov = e_xy[p] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean over bands of single-scale SSIM (11x11 Gaussian, sigma 1.5).
pub fn metric_mssim(reference: &HsiCube, estimate: &HsiCube, peak: f64) -> Result<f64> {
    check_pair(reference, estimate)?;
    let (h, w, b) = reference.dims();
    let mut total = 0.0;
    for k in 0..b {
        total += ssim_plane(&reference.band(k), &estimate.band(k), h, w, peak)?;
    }
    Ok(total / b as f64)
}

/// Angle between two spectra in radians, 0 if either has zero norm.
///
/// Uses `2 atan2(|u - v|, |u + v|)` on the unit vectors, which stays
/// accurate near 0 and pi where `acos` of a rounded cosine does not.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

/// Mean per-pixel spectral angle in degrees. Zero-norm spectra contribute 0.
pub fn metric_sam(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    check_pair(reference, estimate)?;
    let b = reference.bands();
    let total: f64 = reference
        .data()
        .chunks_exact(b)
        .zip(estimate.data().chunks_exact(b))
        .map(|(r, e)| spectral_angle(r, e))
        .sum();
    let pixels = (reference.height() * reference.width()) as f64;
    Ok((total / pixels).to_degrees())
}

/// All three metrics at peak 1 (normalized reflectance).
pub fn evaluate_pair(reference: &HsiCube, estimate: &HsiCube) -> Result<MetricReport> {
    Ok(MetricReport {
        mpsnr_db: metric_mpsnr(reference, estimate, 1.0)?,
        mssim: metric_mssim(reference, estimate, 1.0)?,
        sam_deg: metric_sam(reference, estimate)?,
    })
}
