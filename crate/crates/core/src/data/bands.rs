//! Overlapping band groups.
//!
//! A cube with `B` bands is cut into fixed-width groups of adjacent bands.
//! Groups start every `group_size - overlap` bands; when the next group
//! would run past the last band it is instead anchored at
//! `B - group_size`, so every group is full width.

use serde::{Deserialize, Serialize};

use crate::data::cube::HsiCube;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandGroupSpec {
    pub group_size: usize,
    pub overlap: usize,
    pub starts: Vec<usize>,
}

impl BandGroupSpec {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Band range `[start, end)` of group `g`.
    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.starts[g]..self.starts[g] + self.group_size
    }

    /// Check that the spec fits a cube with `b` bands.
    pub fn check_bands(&self, b: usize) -> Result<()> {
        match self.starts.iter().max() {
            Some(&last) if last + self.group_size <= b => Ok(()),
            Some(&last) => Err(shape_err(format!(
                "band group [{last}, {}) exceeds {b} bands",
                last + self.group_size
            ))),
            None => Err(shape_err("band group spec has no groups")),
        }
    }
}

pub fn band_group_partition(b: usize, group_size: usize, overlap: usize) -> Result<BandGroupSpec> {
    if group_size == 0 || group_size > b {
        return Err(arg_err(format!(
            "group size {group_size} must be in [1, {b}] for a {b}-band cube"
        )));
    }
    if overlap >= group_size {
        return Err(arg_err(format!(
            "overlap {overlap} must be smaller than group size {group_size}"
        )));
    }
    let stride = group_size - overlap;
    let mut starts = vec![0];
    let mut s = 0;
    while s + group_size < b {
        s += stride;
        if s + group_size > b {
            s = b - group_size;
        }
        starts.push(s);
    }
    Ok(BandGroupSpec {
        group_size,
        overlap,
        starts,
    })
}

/// Slice each group out of the cube as a `(1, h, w, group_size)` tensor.
pub fn band_group_extract<T: Scalar>(cube: &HsiCube, spec: &BandGroupSpec) -> Result<Vec<Tensor4<T>>> {
    spec.check_bands(cube.bands())?;
    let full = cube.to_tensor::<T>();
    spec.starts
        .iter()
        .map(|&s| full.slice_channels(s, spec.group_size))
        .collect()
}

/// Recombine per-group predictions; each band is the mean of every group
/// covering it.
pub fn band_group_merge<T: Scalar>(groups: &[Tensor4<T>], spec: &BandGroupSpec, b: usize) -> Result<HsiCube> {
    if groups.len() != spec.len() {
        return Err(shape_err(format!(
            "{} group tensors for a spec with {} groups",
            groups.len(),
            spec.len()
        )));
    }
    spec.check_bands(b)?;
    let first = groups.first().ok_or_else(|| shape_err("no groups to merge"))?.shape();
    let expect = Shape4::new(1, first.h, first.w, spec.group_size);
    if let Some(bad) = groups.iter().find(|g| g.shape() != expect) {
        return Err(shape_err(format!("group tensor {} does not match {expect}", bad.shape())));
    }

    let pixels = first.h * first.w;
    let mut out = vec![0.0; pixels * b];
    let mut count = vec![0usize; b];
    for (g, t) in groups.iter().enumerate() {
        let start = spec.starts[g];
        for k in 0..spec.group_size {
            count[start + k] += 1;
        }
        for (p, px) in t.data().chunks_exact(spec.group_size).enumerate() {
            let dst = &mut out[p * b + start..p * b + start + spec.group_size];
            for (k, (d, &v)) in dst.iter_mut().zip(px).enumerate() {
                // running mean: exact when all contributions are equal
                let n = count[start + k] as f64;
                *d += (v.as_f64() - *d) / n;
            }
        }
    }
    if let Some(k) = count.iter().position(|&c| c == 0) {
        return Err(Error::Internal(format!("band {k} is not covered by any group")));
    }
    HsiCube::new(first.h, first.w, b, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_examples() {
        assert_eq!(band_group_partition(102, 32, 8).unwrap().starts, vec![0, 24, 48, 70]);
        assert_eq!(band_group_partition(32, 32, 8).unwrap().starts, vec![0]);
        assert_eq!(band_group_partition(64, 32, 8).unwrap().starts, vec![0, 24, 32]);
        assert_eq!(band_group_partition(56, 32, 8).unwrap().starts, vec![0, 24]);
        assert_eq!(band_group_partition(10, 4, 0).unwrap().starts, vec![0, 4, 6]);
    }

    #[test]
    fn partition_errors() {
        assert!(matches!(band_group_partition(16, 32, 8), Err(Error::Argument(_))));
        assert!(matches!(band_group_partition(64, 32, 32), Err(Error::Argument(_))));
        assert!(matches!(band_group_partition(64, 0, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn merge_averages_overlaps() {
        let spec = BandGroupSpec {
            group_size: 2,
            overlap: 1,
            starts: vec![0, 1],
        };
        let g0 = Tensor4::<f64>::from_vec(Shape4::new(1, 1, 1, 2), vec![5.0, 1.0]).unwrap();
        let g1 = Tensor4::<f64>::from_vec(Shape4::new(1, 1, 1, 2), vec![3.0, 7.0]).unwrap();
        let cube = band_group_merge(&[g0, g1], &spec, 3).unwrap();
        assert_eq!(cube.spectrum(0, 0), &[5.0, 2.0, 7.0]);
    }

    #[test]
    fn merge_detects_gaps() {
        let spec = BandGroupSpec {
            group_size: 2,
            overlap: 0,
            starts: vec![0],
        };
        let g = Tensor4::<f64>::zeros(Shape4::new(1, 1, 1, 2)).unwrap();
        assert!(matches!(band_group_merge(&[g], &spec, 3), Err(Error::Internal(_))));
    }

    #[test]
    fn extract_rejects_mismatched_spec() {
        let cube = HsiCube::from_fn(2, 2, 8, |_, _, k| k as f64).unwrap();
        let spec = band_group_partition(12, 4, 1).unwrap();
        assert!(matches!(band_group_extract::<f64>(&cube, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn single_group_merge_is_identity() {
        let cube = HsiCube::from_fn(3, 2, 5, |i, j, k| (i + 2 * j) as f64 / 7.0 + k as f64).unwrap();
        let spec = band_group_partition(5, 5, 1).unwrap();
        let groups = band_group_extract::<f64>(&cube, &spec).unwrap();
        assert_eq!(band_group_merge(&groups, &spec, 5).unwrap(), cube);
    }
}
