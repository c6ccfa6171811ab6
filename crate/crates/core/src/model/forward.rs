use crate::data::{band_group_extract, band_group_merge, band_group_partition, HsiCube};
use crate::error::{shape_err, Result};
use crate::model::{
    DilatedFusionParams, DsBlockParams, DsdcnConfig, DsdcnLayers, DsdcnParams, SeparableParams,
    UpsampleBlockParams,
};
use crate::ops::ConvKernel;
use crate::tape::{BoundKernel, Tape, Var};
use crate::tensor::{Scalar, Tensor4};

/// Network layers recorded on a tape.
pub type BoundNet = DsdcnLayers<BoundKernel>;

pub fn stem_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &SeparableParams<BoundKernel>) -> Result<Var> {
    let d = tape.apply(x, &p.depthwise)?;
    let y = tape.apply(d, &p.pointwise)?;
    Ok(tape.relu(y))
}

pub fn ds_block_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &DsBlockParams<BoundKernel>) -> Result<Var> {
    let d = tape.apply(x, &p.depthwise)?;
    let main = tape.apply(d, &p.pointwise)?;
    let skip = tape.apply(x, &p.projection)?;
    tape.add(main, skip)
}

pub fn fusion_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &DilatedFusionParams<BoundKernel>) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    for k in &p.branches {
        let y = tape.apply(x, k)?;
        parts.push(tape.relu(y));
    }
    let cat = tape.concat(&parts)?;
    let y = tape.apply(cat, &p.fuse)?;
    Ok(tape.relu(y))
}

pub fn upsample_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &UpsampleBlockParams<BoundKernel>) -> Result<Var> {
    let t = tape.apply(x, &p.transpose)?;
    let main = tape.relu(t);
    let up = tape.upsample_nearest(x, 2)?;
    let skip = tape.apply(up, &p.skip)?;
    tape.add(main, skip)
}

/// Record the full network on `tape`. `x` must be `(n, h, w, group_size)`.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    net: &BoundNet,
    config: &DsdcnConfig,
) -> Result<Var> {
    let s = tape.value(x).shape();
    if s.c != config.group_size {
        return Err(shape_err(format!(
            "network expects {} input bands, got {}",
            config.group_size, s.c
        )));
    }
    let mut h = stem_on_tape(tape, x, &net.stem)?;
    for b in &net.blocks {
        h = ds_block_on_tape(tape, h, b)?;
    }
    h = fusion_on_tape(tape, h, &net.fusion)?;
    for u in &net.upsample {
        h = upsample_on_tape(tape, h, u)?;
    }
    tape.apply(h, &net.head)
}

fn run_block<T: Scalar, B>(
    x: &Tensor4<T>,
    bind: impl FnOnce(&mut Tape<T>) -> Result<B>,
    body: impl FnOnce(&mut Tape<T>, Var, &B) -> Result<Var>,
) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound = bind(&mut tape)?;
    let y = body(&mut tape, xv, &bound)?;
    Ok(tape.tensor(y))
}

pub fn ds_block_forward<T: Scalar>(x: &Tensor4<T>, p: &DsBlockParams<ConvKernel<T>>) -> Result<Tensor4<T>> {
    run_block(
        x,
        |t| {
            Ok(DsBlockParams {
                depthwise: t.constant_kernel(&p.depthwise)?,
                pointwise: t.constant_kernel(&p.pointwise)?,
                projection: t.constant_kernel(&p.projection)?,
            })
        },
        ds_block_on_tape,
    )
}

pub fn dilated_fusion_forward<T: Scalar>(
    x: &Tensor4<T>,
    p: &DilatedFusionParams<ConvKernel<T>>,
) -> Result<Tensor4<T>> {
    run_block(
        x,
        |t| {
            let [a, b, c] = &p.branches;
            Ok(DilatedFusionParams {
                branches: [t.constant_kernel(a)?, t.constant_kernel(b)?, t.constant_kernel(c)?],
                fuse: t.constant_kernel(&p.fuse)?,
            })
        },
        fusion_on_tape,
    )
}

pub fn upsample_block_forward<T: Scalar>(
    x: &Tensor4<T>,
    p: &UpsampleBlockParams<ConvKernel<T>>,
) -> Result<Tensor4<T>> {
    run_block(
        x,
        |t| {
            Ok(UpsampleBlockParams {
                transpose: t.constant_kernel(&p.transpose)?,
                skip: t.constant_kernel(&p.skip)?,
            })
        },
        upsample_on_tape,
    )
}

/// Inference on a batch of band groups: `(n, h, w, G)` to `(n, a h, a w, G)`.
pub fn dsdcn_forward<T: Scalar>(
    x: &Tensor4<T>,
    params: &DsdcnParams<T>,
    config: &DsdcnConfig,
) -> Result<Tensor4<T>> {
    config.validate()?;
    params.check_layout(config)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let net = params.try_map(|k| tape.constant_kernel(k))?;
    let y = forward_on_tape(&mut tape, xv, &net, config)?;
    Ok(tape.tensor(y))
}

/// Super-resolve a whole cube: split into band groups, run every group
/// through the network, and average the overlaps back together.
pub fn super_resolve<T: Scalar>(lr: &HsiCube, params: &DsdcnParams<T>, config: &DsdcnConfig) -> Result<HsiCube> {
    let spec = band_group_partition(lr.bands(), config.group_size, config.group_overlap)?;
    let groups = band_group_extract::<T>(lr, &spec)?;
    let outs = groups
        .iter()
        .map(|g| dsdcn_forward(g, params, config))
        .collect::<Result<Vec<_>>>()?;
    let mut cube = band_group_merge(&outs, &spec, lr.bands())?;
    cube.band_wavelengths = lr.band_wavelengths.clone();
    Ok(cube)
}
