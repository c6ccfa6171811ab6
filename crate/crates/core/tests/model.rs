mod common;

use common::{rand_kernel, rand_tensor, rng};
use dsdcn_core::data::HsiCube;
use dsdcn_core::model::{
    count_params, dilated_fusion_forward, ds_block_forward, dsdcn_forward, init_params, load_checkpoint,
    save_checkpoint, super_resolve, upsample_block_forward, DilatedFusionParams, DsBlockParams, DsdcnConfig,
    DsdcnParams, UpsampleBlockParams,
};
use dsdcn_core::ops::{
    add, concat_channels, conv2d, depthwise_conv2d, pointwise_conv2d, relu, transpose_conv2d, upsample_nearest,
    ConvKernel, KernelKind,
};
use dsdcn_core::{CheckpointError, Error, Shape4, Tensor4};

fn config(g: usize, c: usize, scale: usize) -> DsdcnConfig {
    DsdcnConfig {
        group_size: g,
        group_overlap: g / 4,
        base_channels: c,
        scale,
        ..Default::default()
    }
}

fn delta_depthwise(c: usize) -> ConvKernel<f64> {
    let mut k = ConvKernel::zeros(KernelKind::Depthwise, 3, 3, c, 1).unwrap();
    for ch in 0..c {
        k.weight.set(1, 1, ch, 0, 1.0);
    }
    k
}

fn identity_pointwise(c: usize) -> ConvKernel<f64> {
    let mut k = ConvKernel::zeros(KernelKind::Pointwise, 1, 1, c, c).unwrap();
    for ch in 0..c {
        k.weight.set(0, 0, ch, ch, 1.0);
    }
    k
}

fn random_ds_block(seed: u64, ci: usize, co: usize) -> DsBlockParams<ConvKernel<f64>> {
    let mut r = rng(seed);
    DsBlockParams {
        depthwise: rand_kernel(&mut r, KernelKind::Depthwise, 3, ci, 1),
        pointwise: rand_kernel(&mut r, KernelKind::Pointwise, 1, ci, co),
        projection: rand_kernel(&mut r, KernelKind::Pointwise, 1, ci, co),
    }
}

#[test]
fn ds_block_fixed_points() {
    let x = rand_tensor(&mut rng(1), 1, 5, 4, 3);
    let zero = DsBlockParams {
        depthwise: ConvKernel::zeros(KernelKind::Depthwise, 3, 3, 3, 1).unwrap(),
        pointwise: ConvKernel::zeros(KernelKind::Pointwise, 1, 1, 3, 3).unwrap(),
        projection: ConvKernel::zeros(KernelKind::Pointwise, 1, 1, 3, 3).unwrap(),
    };
    assert!(ds_block_forward(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));

    let main_path = DsBlockParams {
        depthwise: delta_depthwise(3),
        pointwise: identity_pointwise(3),
        projection: zero.projection.clone(),
    };
    assert_eq!(ds_block_forward(&x, &main_path).unwrap().data(), x.data());

    let residual_only = DsBlockParams {
        depthwise: zero.depthwise.clone(),
        pointwise: zero.pointwise.clone(),
        projection: identity_pointwise(3),
    };
    assert_eq!(ds_block_forward(&x, &residual_only).unwrap().data(), x.data());
}

#[test]
fn ds_block_matches_op_composition() {
    let x = rand_tensor(&mut rng(2), 2, 5, 6, 4);
    let p = random_ds_block(3, 4, 6);
    let expect = add(
        &pointwise_conv2d(&depthwise_conv2d(&x, &p.depthwise).unwrap(), &p.pointwise).unwrap(),
        &pointwise_conv2d(&x, &p.projection).unwrap(),
    )
    .unwrap();
    assert_eq!(ds_block_forward(&x, &p).unwrap().data(), expect.data());

    let wrong = rand_tensor(&mut rng(4), 1, 5, 6, 3);
    assert!(matches!(ds_block_forward(&wrong, &p), Err(Error::Shape(_))));
}

#[test]
fn ds_block_hand_count_is_120() {
    let p = random_ds_block(5, 4, 8);
    assert_eq!(p.param_count(), 3 * 3 * 4 + 4 + 4 * 8 + 8 + 4 * 8 + 8);
    assert_eq!(p.param_count(), 120);
    assert_eq!(count_params::<f64>([]), 0);
}

fn random_fusion(seed: u64, ci: usize, c: usize) -> DilatedFusionParams<ConvKernel<f64>> {
    let mut r = rng(seed);
    let mut branch = |d: usize| {
        let mut k = rand_kernel(&mut r, KernelKind::Standard, 3, ci, c);
        k.dilation = d;
        k
    };
    let branches = [branch(1), branch(2), branch(3)];
    DilatedFusionParams {
        branches,
        fuse: rand_kernel(&mut rng(seed + 100), KernelKind::Pointwise, 1, 3 * c, c),
    }
}

#[test]
fn fusion_block_laws() {
    let mut p = random_fusion(6, 3, 5);
    let x = rand_tensor(&mut rng(7), 1, 8, 8, 3);
    let y = dilated_fusion_forward(&x, &p).unwrap();
    assert_eq!(y.shape(), Shape4::new(1, 8, 8, 5));

    let parts: Vec<Tensor4<f64>> = p
        .branches
        .iter()
        .map(|k| relu(&conv2d(&x, k, k.dilation).unwrap()))
        .collect();
    let cat = concat_channels(&[&parts[0], &parts[1], &parts[2]]).unwrap();
    let expect = relu(&pointwise_conv2d(&cat, &p.fuse).unwrap());
    assert_eq!(y.data(), expect.data());

    for k in p.branches.iter_mut().chain([&mut p.fuse]) {
        k.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    let zeros = Tensor4::zeros(Shape4::new(1, 8, 8, 3)).unwrap();
    assert!(dilated_fusion_forward(&zeros, &p).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn upsample_block_laws() {
    let mut r = rng(8);
    let mut tr = rand_kernel(&mut r, KernelKind::Transpose, 4, 3, 5);
    tr.stride = 2;
    let mut p = UpsampleBlockParams {
        transpose: tr,
        skip: rand_kernel(&mut r, KernelKind::Pointwise, 1, 3, 5),
    };
    let x = rand_tensor(&mut r, 1, 4, 4, 3);
    let y = upsample_block_forward(&x, &p).unwrap();
    assert_eq!(y.shape(), Shape4::new(1, 8, 8, 5));
    let expect = add(
        &relu(&transpose_conv2d(&x, &p.transpose, 2).unwrap()),
        &pointwise_conv2d(&upsample_nearest(&x, 2).unwrap(), &p.skip).unwrap(),
    )
    .unwrap();
    assert_eq!(y.data(), expect.data());

    p.transpose.bias.iter_mut().for_each(|b| *b = 0.0);
    p.skip.bias.iter_mut().for_each(|b| *b = 0.0);
    let zeros = Tensor4::zeros(Shape4::new(1, 4, 4, 3)).unwrap();
    let out = upsample_block_forward(&zeros, &p).unwrap();
    assert_eq!(out.shape(), Shape4::new(1, 8, 8, 5));
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn network_shape_contract() {
    let mut r = rng(9);
    for (scale, blocks) in [(2, 1), (4, 2), (8, 3)] {
        let cfg = config(6, 4, scale);
        let p = init_params::<f64>(&cfg, 1).unwrap();
        assert_eq!(p.upsample.len(), blocks);
        let (h, w) = (3 + scale % 3, 4);
        let x = rand_tensor(&mut r, 2, h, w, 6);
        let y = dsdcn_forward(&x, &p, &cfg).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, scale * h, scale * w, 6));
    }

    let cfg = config(32, 4, 4);
    let p = init_params::<f64>(&cfg, 2).unwrap();
    let x = rand_tensor(&mut r, 1, 16, 16, 32);
    let y = dsdcn_forward(&x, &p, &cfg).unwrap();
    assert_eq!(y.shape(), Shape4::new(1, 64, 64, 32));
    let again = dsdcn_forward(&x, &p, &cfg).unwrap();
    assert_eq!(y.data(), again.data());
}

#[test]
fn wrong_band_count_is_a_shape_error() {
    let cfg = config(32, 4, 2);
    let p = init_params::<f64>(&cfg, 3).unwrap();
    let x = rand_tensor(&mut rng(10), 1, 4, 4, 16);
    assert!(matches!(dsdcn_forward(&x, &p, &cfg), Err(Error::Shape(_))));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = config(8, 5, 4);
    let p = init_params::<f64>(&cfg, 4).unwrap();
    save_checkpoint(&p, &cfg, &path).unwrap();
    let (q, c2): (DsdcnParams<f64>, _) = load_checkpoint(&path).unwrap();
    assert_eq!(c2, cfg);
    assert_eq!(q.param_count(), p.param_count());
    for ((_, name, a), (_, _, b)) in p.named().iter().zip(q.named()) {
        assert_eq!(a.weight.data(), b.weight.data(), "{name}");
        assert_eq!(a.bias, b.bias, "{name}");
    }
    let x = rand_tensor(&mut rng(11), 1, 5, 5, 8);
    assert_eq!(
        dsdcn_forward(&x, &p, &cfg).unwrap().data(),
        dsdcn_forward(&x, &q, &c2).unwrap().data()
    );

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        load_checkpoint::<f64>(&path),
        Err(Error::Checkpoint(CheckpointError::Corrupt(_)))
    ));
}

#[test]
fn super_resolve_merges_overlapping_groups() {
    let cfg = config(4, 3, 2);
    let p = init_params::<f64>(&cfg, 5).unwrap();
    let lr = HsiCube::from_fn(5, 6, 10, |i, j, k| ((i + j + k) % 4) as f64 / 4.0).unwrap();
    let hr = super_resolve(&lr, &p, &cfg).unwrap();
    assert_eq!(hr.dims(), (10, 12, 10));
    assert!(hr.is_finite());
    assert_eq!(hr, super_resolve(&lr, &p, &cfg).unwrap());
}
