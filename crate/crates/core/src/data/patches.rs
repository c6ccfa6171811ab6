use serde::{Deserialize, Serialize};

use crate::data::cube::HsiCube;
use crate::error::{arg_err, Result};

/// Square patch origins `(row, col)` inside a source cube.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSet {
    pub patch_size: usize,
    pub origins: Vec<(usize, usize)>,
    pub source_h: usize,
    pub source_w: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn crop(&self, cube: &HsiCube, idx: usize) -> Result<HsiCube> {
        let (r, c) = self.origins[idx];
        cube.crop(r, c, self.patch_size, self.patch_size)
    }
}

/// Where the held-out test patch sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// Test patch at the bottom centre.
    #[serde(rename = "paviac-like")]
    PaviaCLike,
    /// Test patch at the top left.
    #[serde(rename = "paviau-like")]
    PaviaULike,
}

impl std::str::FromStr for DatasetKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paviac-like" => Ok(Self::PaviaCLike),
            "paviau-like" => Ok(Self::PaviaULike),
            other => Err(arg_err(format!(
                "unknown dataset kind {other:?} (expected paviac-like or paviau-like)"
            ))),
        }
    }
}

/// Stride grid along one axis, with a trailing origin anchored to the far
/// edge when the grid leaves a remainder.
fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v = vec![0];
    while v[v.len() - 1] + stride + patch <= dim {
        let next = v[v.len() - 1] + stride;
        v.push(next);
    }
    let last = v[v.len() - 1];
    if last + patch < dim {
        v.push(dim - patch);
    }
    v
}

pub fn extract_patches(cube: &HsiCube, patch_size: usize, stride: usize) -> Result<PatchSet> {
    patch_grid(cube.height(), cube.width(), patch_size, stride)
}

pub(crate) fn patch_grid(h: usize, w: usize, patch_size: usize, stride: usize) -> Result<PatchSet> {
    if patch_size == 0 || patch_size > h.min(w) {
        return Err(arg_err(format!("patch size {patch_size} does not fit a {h}x{w} cube")));
    }
    if stride == 0 {
        return Err(arg_err("patch stride must be >= 1"));
    }
    let rows = axis_origins(h, patch_size, stride);
    let cols = axis_origins(w, patch_size, stride);
    let origins = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(PatchSet {
        patch_size,
        origins,
        source_h: h,
        source_w: w,
    })
}

pub fn test_origin(h: usize, w: usize, kind: DatasetKind, patch_size: usize) -> Result<(usize, usize)> {
    if patch_size == 0 || patch_size > h.min(w) {
        return Err(arg_err(format!(
            "a {patch_size}x{patch_size} test patch does not fit a {h}x{w} cube"
        )));
    }
    Ok(match kind {
        DatasetKind::PaviaCLike => (h - patch_size, (w - patch_size) / 2),
        DatasetKind::PaviaULike => (0, 0),
    })
}

fn overlaps(a: (usize, usize), b: (usize, usize), size: usize) -> bool {
    a.0 < b.0 + size && b.0 < a.0 + size && a.1 < b.1 + size && b.1 < a.1 + size
}

/// Hold out one test patch and tile the rest of the cube for training.
/// Training patches never intersect the test rectangle.
pub fn protocol_split(
    cube: &HsiCube,
    kind: DatasetKind,
    patch_size: usize,
    stride: usize,
) -> Result<(PatchSet, (usize, usize))> {
    let test = test_origin(cube.height(), cube.width(), kind, patch_size)?;
    let mut grid = extract_patches(cube, patch_size, stride)?;
    grid.origins.retain(|&o| !overlaps(o, test, patch_size));
    Ok((grid, test))
}
