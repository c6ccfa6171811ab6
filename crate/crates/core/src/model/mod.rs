//! The super-resolution network.
//!
//! Pipeline for one band group of `G` channels at scale `a`:
//!
//! ```text
//! separable stem (depthwise 3x3 + pointwise G->C) + ReLU
//!   -> 3 depthwise separable blocks with 1x1 residual projection
//!   -> dilated fusion (3x3 at dilations 1, 2, 3, ReLU, concat, 1x1 fuse, ReLU)
//!   -> log2(a) upsample blocks (ReLU(transpose 4x4 / 2) + 1x1(nearest x2))
//!   -> linear 1x1 head C->G
//! ```
//!
//! All widths inside the network equal `base_channels` (C). Every
//! convolution has a bias. With `G = 32`, `a = 4` the learnable parameter
//! count is `70 C^2 + 109 C + 352`; the reference width `C = 116` gives
//! 954,916 parameters.

mod checkpoint;
mod forward;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint_config, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{
    dilated_fusion_forward, ds_block_forward, ds_block_on_tape, dsdcn_forward, forward_on_tape, fusion_on_tape,
    stem_on_tape, super_resolve, upsample_block_forward, upsample_on_tape, BoundNet,
};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::ops::{ConvKernel, KernelKind};
use crate::tensor::Scalar;

/// Reference width that puts the 4x model (32-band groups) at ~0.95M parameters.
pub const REFERENCE_BASE_CHANNELS: usize = 116;
/// Transpose-convolution kernel size used by every upsample block.
pub const UPSAMPLE_KERNEL: usize = 4;
pub const UPSAMPLE_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(arg_err(format!("unknown precision {other:?} (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsdcnConfig {
    /// Bands per group; the network's input and output channel count.
    pub group_size: usize,
    /// Bands shared by consecutive groups.
    pub group_overlap: usize,
    pub base_channels: usize,
    pub num_ds_blocks: usize,
    pub dilation_rates: [usize; 3],
    /// Upscaling factor; a power of two.
    pub scale: usize,
    pub precision: Precision,
}

impl Default for DsdcnConfig {
    fn default() -> Self {
        Self {
            group_size: 32,
            group_overlap: 8,
            base_channels: REFERENCE_BASE_CHANNELS,
            num_ds_blocks: 3,
            dilation_rates: [1, 2, 3],
            scale: 4,
            precision: Precision::F64,
        }
    }
}

impl DsdcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.base_channels == 0 {
            return Err(arg_err("group_size and base_channels must be >= 1"));
        }
        if self.group_overlap >= self.group_size {
            return Err(arg_err(format!(
                "group_overlap {} must be smaller than group_size {}",
                self.group_overlap, self.group_size
            )));
        }
        if self.num_ds_blocks != 3 {
            return Err(arg_err(format!(
                "the network uses exactly 3 depthwise separable blocks, got {}",
                self.num_ds_blocks
            )));
        }
        if self.dilation_rates.contains(&0) {
            return Err(arg_err("dilation rates must be >= 1"));
        }
        if self.scale < 2 || !self.scale.is_power_of_two() {
            return Err(arg_err(format!("scale must be a power of two >= 2, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn num_upsample_blocks(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }
}

/// Depthwise 3x3 followed by a pointwise projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableParams<K> {
    pub depthwise: K,
    pub pointwise: K,
}

/// One depthwise separable block: `pointwise(depthwise(x)) + projection(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DsBlockParams<K> {
    pub depthwise: K,
    pub pointwise: K,
    /// 1x1 residual projection; must produce the same width as `pointwise`.
    pub projection: K,
}

/// Three parallel dilated 3x3 branches fused by a 1x1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DilatedFusionParams<K> {
    pub branches: [K; 3],
    pub fuse: K,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleBlockParams<K> {
    pub transpose: K,
    pub skip: K,
}

/// Every layer of the network, generic over how a kernel is held (owned
/// [`ConvKernel`]s, or handles on a tape).
#[derive(Debug, Clone, PartialEq)]
pub struct DsdcnLayers<K> {
    pub stem: SeparableParams<K>,
    pub blocks: Vec<DsBlockParams<K>>,
    pub fusion: DilatedFusionParams<K>,
    pub upsample: Vec<UpsampleBlockParams<K>>,
    pub head: K,
}

pub type DsdcnParams<T> = DsdcnLayers<ConvKernel<T>>;

impl<K> DsdcnLayers<K> {
    /// Kernels in canonical order, each with its block name and its own name.
    pub fn named(&self) -> Vec<(String, String, &K)> {
        let mut v = vec![
            ("stem".to_string(), "stem.depthwise".to_string(), &self.stem.depthwise),
            ("stem".to_string(), "stem.pointwise".to_string(), &self.stem.pointwise),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let block = format!("ds_block.{i}");
            v.push((block.clone(), format!("{block}.depthwise"), &b.depthwise));
            v.push((block.clone(), format!("{block}.pointwise"), &b.pointwise));
            v.push((block.clone(), format!("{block}.projection"), &b.projection));
        }
        for (i, k) in self.fusion.branches.iter().enumerate() {
            v.push(("fusion".to_string(), format!("fusion.branch{i}"), k));
        }
        v.push(("fusion".to_string(), "fusion.fuse".to_string(), &self.fusion.fuse));
        for (i, u) in self.upsample.iter().enumerate() {
            let block = format!("upsample.{i}");
            v.push((block.clone(), format!("{block}.transpose"), &u.transpose));
            v.push((block.clone(), format!("{block}.skip"), &u.skip));
        }
        v.push(("head".to_string(), "head".to_string(), &self.head));
        v
    }

    /// Same canonical order as [`DsdcnLayers::named`].
    pub fn kernels_mut(&mut self) -> Vec<&mut K> {
        let mut v = vec![&mut self.stem.depthwise, &mut self.stem.pointwise];
        for b in &mut self.blocks {
            v.push(&mut b.depthwise);
            v.push(&mut b.pointwise);
            v.push(&mut b.projection);
        }
        for k in &mut self.fusion.branches {
            v.push(k);
        }
        v.push(&mut self.fusion.fuse);
        for u in &mut self.upsample {
            v.push(&mut u.transpose);
            v.push(&mut u.skip);
        }
        v.push(&mut self.head);
        v
    }

    /// Structure-preserving conversion, visiting kernels in canonical order.
    pub fn try_map<K2>(&self, mut f: impl FnMut(&K) -> Result<K2>) -> Result<DsdcnLayers<K2>> {
        let stem = SeparableParams {
            depthwise: f(&self.stem.depthwise)?,
            pointwise: f(&self.stem.pointwise)?,
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(DsBlockParams {
                depthwise: f(&b.depthwise)?,
                pointwise: f(&b.pointwise)?,
                projection: f(&b.projection)?,
            });
        }
        let [b0, b1, b2] = &self.fusion.branches;
        let fusion = DilatedFusionParams {
            branches: [f(b0)?, f(b1)?, f(b2)?],
            fuse: f(&self.fusion.fuse)?,
        };
        let mut upsample = Vec::with_capacity(self.upsample.len());
        for u in &self.upsample {
            upsample.push(UpsampleBlockParams {
                transpose: f(&u.transpose)?,
                skip: f(&u.skip)?,
            });
        }
        Ok(DsdcnLayers {
            stem,
            blocks,
            fusion,
            upsample,
            head: f(&self.head)?,
        })
    }
}

/// Number of learnable scalars (kernel elements plus biases).
pub fn count_params<'a, T: Scalar>(kernels: impl IntoIterator<Item = &'a ConvKernel<T>>) -> usize {
    kernels.into_iter().map(ConvKernel::param_count).sum()
}

impl<T: Scalar> DsBlockParams<ConvKernel<T>> {
    pub fn param_count(&self) -> usize {
        count_params([&self.depthwise, &self.pointwise, &self.projection])
    }
}

impl<T: Scalar> DsdcnParams<T> {
    pub fn param_count(&self) -> usize {
        count_params(self.named().into_iter().map(|(_, _, k)| k))
    }

    /// Per-block parameter totals in pipeline order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (block, _, k) in self.named() {
            match out.last_mut() {
                Some((name, n)) if *name == block => *n += k.param_count(),
                _ => out.push((block, k.param_count())),
            }
        }
        out
    }

    /// Zero-initialized parameters with the layout implied by `config`.
    pub fn zeros(config: &DsdcnConfig) -> Result<Self> {
        config.validate()?;
        let (g, c) = (config.group_size, config.base_channels);
        let pw = |ci, co| ConvKernel::<T>::zeros(KernelKind::Pointwise, 1, 1, ci, co);
        let dw = |ch| ConvKernel::<T>::zeros(KernelKind::Depthwise, 3, 3, ch, 1);
        let stem = SeparableParams {
            depthwise: dw(g)?,
            pointwise: pw(g, c)?,
        };
        let blocks = (0..config.num_ds_blocks)
            .map(|_| {
                Ok(DsBlockParams {
                    depthwise: dw(c)?,
                    pointwise: pw(c, c)?,
                    projection: pw(c, c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let branch = |d: usize| -> Result<ConvKernel<T>> {
            let mut k = ConvKernel::zeros(KernelKind::Standard, 3, 3, c, c)?;
            k.dilation = d;
            Ok(k)
        };
        let [d0, d1, d2] = config.dilation_rates;
        let fusion = DilatedFusionParams {
            branches: [branch(d0)?, branch(d1)?, branch(d2)?],
            fuse: pw(3 * c, c)?,
        };
        let upsample = (0..config.num_upsample_blocks())
            .map(|_| {
                let mut t = ConvKernel::zeros(KernelKind::Transpose, UPSAMPLE_KERNEL, UPSAMPLE_KERNEL, c, c)?;
                t.stride = UPSAMPLE_STRIDE;
                Ok(UpsampleBlockParams {
                    transpose: t,
                    skip: pw(c, c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem,
            blocks,
            fusion,
            upsample,
            head: pw(c, g)?,
        })
    }

    /// Check that the kernel shapes match `config` exactly.
    pub fn check_layout(&self, config: &DsdcnConfig) -> Result<()> {
        let expect = Self::zeros(config)?;
        let ours = self.named();
        let theirs = expect.named();
        if ours.len() != theirs.len() {
            return Err(crate::error::shape_err(format!(
                "parameter set has {} kernels, config implies {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((_, name, a), (_, _, b)) in ours.iter().zip(&theirs) {
            if a.weight.shape() != b.weight.shape() || a.bias.len() != b.bias.len() || a.kind != b.kind {
                return Err(crate::error::shape_err(format!(
                    "kernel {name} is {} but config implies {}",
                    a.weight.shape(),
                    b.weight.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> DsdcnParams<U> {
        self.try_map(|k| {
            Ok(ConvKernel {
                kind: k.kind,
                weight: k.weight.cast(),
                bias: k.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
                dilation: k.dilation,
                stride: k.stride,
            })
        })
        .expect("cast preserves layout")
    }

    /// Flat views of every weight and bias buffer, canonical order.
    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for k in self.kernels_mut() {
            let ConvKernel { weight, bias, .. } = k;
            out.push(weight.data_mut());
            out.push(bias.as_mut_slice());
        }
        out
    }

    pub fn buffers(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for (_, _, k) in self.named() {
            out.push(k.weight.data());
            out.push(k.bias.as_slice());
        }
        out
    }
}

/// Variance gain of a kernel given where it sits: 2 before a ReLU, 1 for a
/// linear map, halved for each summand of a two-way sum.
fn init_gain(name: &str) -> f64 {
    let role = name.rsplit('.').next().unwrap_or(name);
    if name.starts_with("stem.") {
        return if role == "pointwise" { 2.0 } else { 1.0 };
    }
    if name.starts_with("ds_block.") {
        return if role == "depthwise" { 1.0 } else { 0.5 };
    }
    if name.starts_with("fusion.") {
        return 2.0;
    }
    if name.starts_with("upsample.") {
        return if role == "transpose" { 1.0 } else { 0.5 };
    }
    1.0
}

/// Fan-in scaled uniform initialization: weights in
/// `+-sqrt(3 gain / fan_in)` with `gain <= 2`, so never wider than
/// `+-sqrt(6 / fan_in)`; biases zero. Deterministic for a given seed and
/// independent of `T`.
pub fn init_params<T: Scalar>(config: &DsdcnConfig, seed: u64) -> Result<DsdcnParams<T>> {
    let mut params = DsdcnParams::<T>::zeros(config)?;
    let names: Vec<String> = params.named().into_iter().map(|(_, n, _)| n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, k) in names.iter().zip(params.kernels_mut()) {
        let bound = (3.0 * init_gain(name) / k.fan_in() as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for w in k.weight.data_mut() {
            *w = T::lit(dist.sample(&mut rng));
        }
    }
    Ok(params)
}
