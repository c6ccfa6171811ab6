use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, CubeError, Result};
use crate::tensor::{read_le, write_le, DType, Scalar, Shape4, Tensor4};

pub const HSIC_MAGIC: &[u8; 4] = b"HSIC";
pub const HSIC_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 3 * 4 + 1;

/// A hyperspectral image stored band-interleaved-by-pixel: `h x w x b`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    h: usize,
    w: usize,
    b: usize,
    data: Vec<f64>,
    pub band_wavelengths: Option<Vec<f64>>,
}

impl HsiCube {
    pub fn new(h: usize, w: usize, b: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || b == 0 {
            return Err(shape_err(format!("cube dims must be >= 1, got {h}x{w}x{b}")));
        }
        if data.len() != h * w * b {
            return Err(shape_err(format!(
                "cube data has {} values, expected {h}x{w}x{b} = {}",
                data.len(),
                h * w * b
            )));
        }
        Ok(Self {
            h,
            w,
            b,
            data,
            band_wavelengths: None,
        })
    }

    pub fn from_fn(h: usize, w: usize, b: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w * b);
        for i in 0..h {
            for j in 0..w {
                for k in 0..b {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(h, w, b, data)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bands(&self) -> usize {
        self.b
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.b)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.w + j) * self.b + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.w + j) * self.b + k] = v;
    }

    #[inline]
    pub fn spectrum(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.w + j) * self.b;
        &self.data[start..start + self.b]
    }

    /// One band as a row-major `h x w` plane.
    pub fn band(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(self.b).copied().collect()
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || row + h > self.h || col + w > self.w {
            return Err(arg_err(format!(
                "crop {h}x{w} at ({row}, {col}) exceeds cube {}x{}",
                self.h, self.w
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.b);
        for i in row..row + h {
            let start = (i * self.w + col) * self.b;
            data.extend_from_slice(&self.data[start..start + w * self.b]);
        }
        let mut out = Self::new(h, w, self.b, data)?;
        out.band_wavelengths = self.band_wavelengths.clone();
        Ok(out)
    }

    /// View the cube as a batch-of-one tensor `(1, h, w, b)`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4::from_vec(
            Shape4::new(1, self.h, self.w, self.b),
            self.data.iter().map(|&v| T::lit(v)).collect(),
        )
        .expect("cube dims are valid")
    }

    /// Inverse of [`HsiCube::to_tensor`]; the tensor must have `n == 1`.
    pub fn from_tensor<T: Scalar>(t: &Tensor4<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 {
            return Err(shape_err(format!("expected a single-sample tensor, got {s}")));
        }
        Self::new(s.h, s.w, s.c, t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Serialize to the HSIC layout.
pub fn encode_cube(cube: &HsiCube, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + cube.data.len() * dtype.size());
    out.extend_from_slice(HSIC_MAGIC);
    out.extend_from_slice(&HSIC_VERSION.to_le_bytes());
    for d in [cube.h, cube.w, cube.b] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(dtype.tag());
    write_le(&cube.data, dtype, &mut out);
    out
}

/// Parse HSIC bytes; returns the cube and the stored dtype.
pub fn decode_cube(bytes: &[u8]) -> Result<(HsiCube, DType)> {
    if bytes.len() < HSIC_MAGIC.len() || &bytes[..4] != HSIC_MAGIC {
        return Err(CubeError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(CubeError::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        }
        .into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != HSIC_VERSION {
        return Err(CubeError::UnsupportedVersion(version).into());
    }
    let dim = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as u64;
    let (h, w, b) = (dim(6), dim(10), dim(14));
    let tag = bytes[18];
    let dtype = DType::from_tag(tag).ok_or(CubeError::UnknownDtype(tag))?;
    let payload = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(b))
        .and_then(|v| v.checked_mul(dtype.size() as u64))
        .filter(|&v| v > 0 && v <= usize::MAX as u64)
        .ok_or(CubeError::DimOverflow { h, w, b })?;
    let expected = HEADER_LEN as u64 + payload;
    if bytes.len() as u64 != expected {
        return Err(CubeError::Truncated {
            expected,
            found: bytes.len() as u64,
        }
        .into());
    }
    let data = read_le::<f64>(&bytes[HEADER_LEN..], dtype);
    Ok((HsiCube::new(h as usize, w as usize, b as usize, data)?, dtype))
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    fs::write(path, encode_cube(cube, dtype))?;
    Ok(())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    Ok(decode_cube(&fs::read(path)?)?.0)
}

/// Per-band min/max used by [`normalize`]; enables exact inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Per-band min-max scaling to `[0, 1]`. Constant bands map to 0.
pub fn normalize(cube: &HsiCube) -> (HsiCube, NormRecord) {
    let b = cube.b;
    let mut min = vec![f64::INFINITY; b];
    let mut max = vec![f64::NEG_INFINITY; b];
    for px in cube.data.chunks_exact(b) {
        for k in 0..b {
            min[k] = min[k].min(px[k]);
            max[k] = max[k].max(px[k]);
        }
    }
    let record = NormRecord { min, max };
    let out = normalize_with(cube, &record).expect("record matches cube");
    (out, record)
}

/// Apply an existing record, e.g. to put an estimate on the scale of its
/// reference. Bands with zero range map to 0.
pub fn normalize_with(cube: &HsiCube, record: &NormRecord) -> Result<HsiCube> {
    check_record(cube, record)?;
    let mut out = cube.clone();
    for px in out.data.chunks_exact_mut(cube.b) {
        for k in 0..cube.b {
            let range = record.max[k] - record.min[k];
            px[k] = if range > 0.0 { (px[k] - record.min[k]) / range } else { 0.0 };
        }
    }
    Ok(out)
}

fn check_record(cube: &HsiCube, record: &NormRecord) -> Result<()> {
    if record.min.len() != cube.b || record.max.len() != cube.b {
        return Err(shape_err(format!(
            "normalization record covers {} bands, cube has {}",
            record.min.len(),
            cube.b
        )));
    }
    Ok(())
}

pub fn denormalize(cube: &HsiCube, record: &NormRecord) -> Result<HsiCube> {
    check_record(cube, record)?;
    let mut out = cube.clone();
    for px in out.data.chunks_exact_mut(cube.b) {
        for k in 0..cube.b {
            px[k] = record.min[k] + px[k] * (record.max[k] - record.min[k]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn sample() -> HsiCube {
        HsiCube::from_fn(3, 3, 2, |i, j, k| (i * 3 + j) as f64 * 0.37 - k as f64 * 1.5).unwrap()
    }

    #[test]
    fn round_trip_both_dtypes() {
        let cube = sample();
        let (back, dt) = decode_cube(&encode_cube(&cube, DType::F64)).unwrap();
        assert_eq!(dt, DType::F64);
        assert_eq!(back, cube);
        assert_eq!(back.dims(), (3, 3, 2));

        let (f32_cube, _) = decode_cube(&encode_cube(&cube, DType::F32)).unwrap();
        let (again, _) = decode_cube(&encode_cube(&f32_cube, DType::F32)).unwrap();
        assert_eq!(again, f32_cube);
    }

    #[test]
    fn distinct_load_errors() {
        let bytes = encode_cube(&sample(), DType::F64);
        assert!(matches!(
            decode_cube(&bytes[..HEADER_LEN]),
            Err(Error::Cube(CubeError::Truncated { .. }))
        ));
        assert!(matches!(decode_cube(b"NOPE....").unwrap_err(), Error::Cube(CubeError::BadMagic)));

        let mut huge = bytes[..HEADER_LEN].to_vec();
        huge[6..18].copy_from_slice(&[0xff; 12]);
        assert!(matches!(
            decode_cube(&huge).unwrap_err(),
            Error::Cube(CubeError::DimOverflow { .. })
        ));

        let mut zero = bytes.clone();
        zero[6..10].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode_cube(&zero).unwrap_err(),
            Error::Cube(CubeError::DimOverflow { .. })
        ));

        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(
            decode_cube(&ver).unwrap_err(),
            Error::Cube(CubeError::UnsupportedVersion(9))
        ));

        let mut tag = bytes;
        tag[18] = 3;
        assert!(matches!(decode_cube(&tag).unwrap_err(), Error::Cube(CubeError::UnknownDtype(3))));
    }

    #[test]
    fn normalize_examples() {
        let cube = HsiCube::new(1, 2, 2, vec![2.0, 5.0, 4.0, 5.0]).unwrap();
        let (n, rec) = normalize(&cube);
        assert_eq!(n.band(0), vec![0.0, 1.0]);
        assert_eq!(n.band(1), vec![0.0, 0.0]);
        let back = denormalize(&n, &rec).unwrap();
        assert_eq!(back, cube);
    }

    #[test]
    fn normalize_round_trip_within_tolerance() {
        let cube = sample();
        let (n, rec) = normalize(&cube);
        assert!(n.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let back = denormalize(&n, &rec).unwrap();
        for (a, b) in back.data().iter().zip(cube.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_bounds() {
        let cube = sample();
        let c = cube.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.spectrum(0, 0), cube.spectrum(1, 1));
        assert!(cube.crop(2, 0, 2, 1).is_err());
    }
}
