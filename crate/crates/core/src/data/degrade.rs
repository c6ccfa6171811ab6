use crate::data::cube::HsiCube;
use crate::error::{arg_err, Result};

/// Area-based downsampling: each output pixel is the mean of its
/// `factor x factor` source block, band by band.
///
/// Even block sizes are summed quadrant by quadrant. Since dividing by a
/// power of two is exact, this makes `factor = 4` bit-identical to two
/// passes at `factor = 2` (and likewise for 8).
pub fn area_downsample(cube: &HsiCube, factor: usize) -> Result<HsiCube> {
    let (h, w, b) = cube.dims();
    if factor == 0 {
        return Err(arg_err("downsample factor must be >= 1"));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(arg_err(format!(
            "cube {h}x{w} is not divisible by downsample factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let mut data = Vec::with_capacity(oh * ow * b);
    for i in 0..oh {
        for j in 0..ow {
            for k in 0..b {
                data.push(block_sum(cube, k, i * factor, j * factor, factor) / area);
            }
        }
    }
    HsiCube::new(oh, ow, b, data)
}

fn block_sum(cube: &HsiCube, k: usize, r0: usize, c0: usize, size: usize) -> f64 {
    if size == 1 {
        return cube.at(r0, c0, k);
    }
    if size % 2 == 0 {
        let h = size / 2;
        return block_sum(cube, k, r0, c0, h)
            + block_sum(cube, k, r0, c0 + h, h)
            + block_sum(cube, k, r0 + h, c0, h)
            + block_sum(cube, k, r0 + h, c0 + h, h);
    }
    let mut s = 0.0;
    for i in r0..r0 + size {
        for j in c0..c0 + size {
            s += cube.at(i, j, k);
        }
    }
    s
}
