use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{area_downsample, denormalize, load_cube, normalize, normalize_with, HsiCube};
use crate::error::{arg_err, Result};
use crate::metrics::{evaluate_pair, MetricReport};
use crate::model::{load_checkpoint, read_checkpoint_config, super_resolve, DsdcnConfig, DsdcnParams, Precision};
use crate::tensor::Scalar;

/// Degrade a normalized HR cube by the model's scale, super-resolve it, and
/// score the result against the original.
pub fn evaluate_cube<T: Scalar>(truth: &HsiCube, params: &DsdcnParams<T>, config: &DsdcnConfig) -> Result<MetricReport> {
    let lr = area_downsample(truth, config.scale)?;
    let sr = super_resolve(&lr, params, config)?;
    evaluate_pair(truth, &sr)
}

/// Rectangle `row,col,height,width` inside a cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn square(origin: (usize, usize), size: usize) -> Self {
        Self {
            row: origin.0,
            col: origin.1,
            height: size,
            width: size,
        }
    }

    pub fn crop(&self, cube: &HsiCube) -> Result<HsiCube> {
        cube.crop(self.row, self.col, self.height, self.width)
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.row, self.col, self.height, self.width)
    }
}

impl std::str::FromStr for Region {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| arg_err(format!("region {s:?} must be row,col,height,width")))?;
        match parts[..] {
            [row, col, height, width] => Ok(Self { row, col, height, width }),
            _ => Err(arg_err(format!("region {s:?} must be row,col,height,width"))),
        }
    }
}

/// Parameters at whichever precision the checkpoint was stored in.
#[derive(Debug, Clone)]
pub enum AnyParams {
    F32(DsdcnParams<f32>),
    F64(DsdcnParams<f64>),
}

impl AnyParams {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, DsdcnConfig)> {
        let path = path.as_ref();
        let config = read_checkpoint_config(path)?;
        Ok(match config.precision {
            Precision::F32 => {
                let (p, c) = load_checkpoint::<f32>(path)?;
                (Self::F32(p), c)
            }
            Precision::F64 => {
                let (p, c) = load_checkpoint::<f64>(path)?;
                (Self::F64(p), c)
            }
        })
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::F32(p) => p.param_count(),
            Self::F64(p) => p.param_count(),
        }
    }

    pub fn super_resolve(&self, lr: &HsiCube, config: &DsdcnConfig) -> Result<HsiCube> {
        match self {
            Self::F32(p) => super_resolve(lr, p, config),
            Self::F64(p) => super_resolve(lr, p, config),
        }
    }

    pub fn evaluate_cube(&self, truth: &HsiCube, config: &DsdcnConfig) -> Result<MetricReport> {
        match self {
            Self::F32(p) => evaluate_cube(truth, p, config),
            Self::F64(p) => evaluate_cube(truth, p, config),
        }
    }
}

fn prepared_truth(truth: &HsiCube, region: Option<Region>) -> Result<HsiCube> {
    let (norm, _) = normalize(truth);
    match region {
        Some(r) => r.crop(&norm),
        None => Ok(norm),
    }
}

/// Score a checkpoint on a ground-truth cube: normalize the cube, optionally
/// crop `region`, degrade by `scale`, super-resolve and compare.
pub fn evaluate(
    checkpoint: impl AsRef<Path>,
    truth: impl AsRef<Path>,
    scale: usize,
    region: Option<Region>,
) -> Result<MetricReport> {
    let (params, config) = AnyParams::load(checkpoint)?;
    if config.scale != scale {
        return Err(arg_err(format!(
            "checkpoint was trained for {}x, evaluation requested {scale}x",
            config.scale
        )));
    }
    let truth = prepared_truth(&load_cube(truth)?, region)?;
    params.evaluate_cube(&truth, &config)
}

/// Score an existing estimate against ground truth, both brought to the
/// truth's normalized scale.
pub fn evaluate_prediction(truth: &HsiCube, prediction: &HsiCube, region: Option<Region>) -> Result<MetricReport> {
    let (norm, record) = normalize(truth);
    let pred = normalize_with(prediction, &record)?;
    match region {
        Some(r) => evaluate_pair(&r.crop(&norm)?, &r.crop(&pred)?),
        None => evaluate_pair(&norm, &pred),
    }
}

/// Super-resolve a cube in physical units: normalize per band, run the
/// network, and map the result back through the same record.
pub fn super_resolve_physical(lr: &HsiCube, params: &AnyParams, config: &DsdcnConfig) -> Result<HsiCube> {
    let (norm, record) = normalize(lr);
    let sr = params.super_resolve(&norm, config)?;
    denormalize(&sr, &record)
}
