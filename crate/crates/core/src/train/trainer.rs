use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    area_downsample, band_group_extract, band_group_partition, normalize, protocol_split, DatasetKind, HsiCube,
};
use crate::error::{arg_err, Error, Result};
use crate::loss::LossWeights;
use crate::metrics::MetricReport;
use crate::model::{forward_on_tape, init_params, save_checkpoint, DsdcnConfig, DsdcnParams};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor4};
use crate::train::adam::{adam_step, AdamConfig, AdamState};
use crate::train::eval::evaluate_cube;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without a strict validation MPSNR improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 4,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            patience: 10,
            max_epochs: 100,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(arg_err("batch_size must be >= 1"));
        }
        if self.patience == 0 {
            return Err(arg_err("patience must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(arg_err("max_epochs must be >= 1"));
        }
        self.adam().validate()?;
        self.loss.validate()
    }
}

/// How the source cube is cut into training, validation and test patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset_kind: DatasetKind,
    pub patch_size: usize,
    /// Defaults to half the patch size.
    pub patch_stride: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_kind: DatasetKind::PaviaCLike,
            patch_size: 144,
            patch_stride: None,
        }
    }
}

impl DataConfig {
    pub fn stride(&self) -> usize {
        self.patch_stride.unwrap_or((self.patch_size / 2).max(1))
    }
}

/// Normalized patches ready for [`train`].
#[derive(Debug, Clone)]
pub struct ProtocolData {
    pub train: Vec<HsiCube>,
    pub train_origins: Vec<(usize, usize)>,
    pub validation: HsiCube,
    pub validation_origin: (usize, usize),
    pub test_origin: (usize, usize),
    pub patch_size: usize,
}

/// Normalize the whole cube, hold out the test patch, and carve the
/// validation patch from the training tiles (the last one, which is removed
/// from training unless it is the only tile).
pub fn prepare_protocol(cube: &HsiCube, data: &DataConfig) -> Result<ProtocolData> {
    let (norm, _) = normalize(cube);
    let (set, test_origin) = protocol_split(&norm, data.dataset_kind, data.patch_size, data.stride())?;
    if set.is_empty() {
        return Err(arg_err(format!(
            "no training patches remain in a {}x{} cube after holding out the {}x{} test patch",
            cube.height(),
            cube.width(),
            data.patch_size,
            data.patch_size
        )));
    }
    let mut origins = set.origins.clone();
    let validation_origin = *origins.last().expect("non-empty");
    if origins.len() > 1 {
        origins.pop();
    }
    let crop = |o: (usize, usize)| norm.crop(o.0, o.1, data.patch_size, data.patch_size);
    Ok(ProtocolData {
        train: origins.iter().map(|&o| crop(o)).collect::<Result<_>>()?,
        train_origins: origins,
        validation: crop(validation_origin)?,
        validation_origin,
        test_origin,
        patch_size: data.patch_size,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub steps: usize,
    pub val_mpsnr_db: f64,
    pub val_mssim: f64,
    pub val_sam_deg: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mpsnr: f64,
    pub stopped_epoch: usize,
    pub total_steps: usize,
    pub checkpoint: Option<PathBuf>,
    /// Loss of every optimizer step, in order.
    #[serde(skip)]
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch record serializes") + "\n")
            .collect()
    }
}

/// Optional artifacts written while training.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    /// Rewritten each time validation MPSNR improves.
    pub checkpoint: Option<PathBuf>,
    /// Line-delimited JSON, one record per epoch.
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub report: TrainReport,
    pub best_params: DsdcnParams<T>,
    pub final_params: DsdcnParams<T>,
}

struct Pair<T> {
    lr: Tensor4<T>,
    hr: Tensor4<T>,
}

fn build_pairs<T: Scalar>(patches: &[HsiCube], model: &DsdcnConfig) -> Result<Vec<Pair<T>>> {
    let mut pairs = Vec::new();
    for p in patches {
        let spec = band_group_partition(p.bands(), model.group_size, model.group_overlap)?;
        let lr = area_downsample(p, model.scale)?;
        let lr_groups = band_group_extract::<T>(&lr, &spec)?;
        let hr_groups = band_group_extract::<T>(p, &spec)?;
        pairs.extend(lr_groups.into_iter().zip(hr_groups).map(|(lr, hr)| Pair { lr, hr }));
    }
    Ok(pairs)
}

/// One forward/backward/update on a batch; returns the batch loss.
pub fn train_step<T: Scalar>(
    params: &mut DsdcnParams<T>,
    state: &mut AdamState<T>,
    model: &DsdcnConfig,
    cfg: &TrainConfig,
    lr_batch: Tensor4<T>,
    hr_batch: Tensor4<T>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(lr_batch);
    let y = tape.constant(hr_batch);
    let net = params.try_map(|k| tape.param_kernel(k))?;
    let pred = forward_on_tape(&mut tape, x, &net, model)?;
    let loss = tape.loss(y, pred, cfg.loss)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss became {value}")));
    }
    tape.backward(loss)?;
    let grads: Vec<Option<&[T]>> = net
        .named()
        .into_iter()
        .flat_map(|(_, _, k)| [tape.grad(k.weight), tape.grad(k.bias)])
        .collect();
    adam_step(&mut params.buffers_mut(), &grads, state, &cfg.adam())?;
    Ok(value)
}

/// Train from scratch on normalized HR patches, validating on `validation`
/// after every epoch.
///
/// An epoch is one shuffled pass over every (patch, band group) pair in
/// batches of `batch_size`; the last batch may be smaller. Training stops
/// after `max_epochs` or once `patience` epochs pass without a strict
/// improvement of validation MPSNR.
pub fn train<T: Scalar>(
    model: &DsdcnConfig,
    cfg: &TrainConfig,
    patches: &[HsiCube],
    validation: &HsiCube,
    out: &TrainOutput,
) -> Result<TrainOutcome<T>> {
    model.validate()?;
    cfg.validate()?;
    if patches.is_empty() {
        return Err(arg_err("training set is empty"));
    }
    let pairs = build_pairs::<T>(patches, model)?;
    let mut params = init_params::<T>(model, cfg.seed)?;
    let mut state = AdamState::new(params.buffers().iter().map(|b| b.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut report_file = match &out.report {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_mpsnr: f64::NEG_INFINITY,
        stopped_epoch: 0,
        total_steps: 0,
        checkpoint: out.checkpoint.clone(),
        step_losses: Vec::new(),
    };
    let mut best_params = params.clone();
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let lr: Vec<Tensor4<T>> = batch.iter().map(|&i| pairs[i].lr.clone()).collect();
            let hr: Vec<Tensor4<T>> = batch.iter().map(|&i| pairs[i].hr.clone()).collect();
            let loss = train_step(
                &mut params,
                &mut state,
                model,
                cfg,
                Tensor4::stack(&lr)?,
                Tensor4::stack(&hr)?,
            )
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (epoch {epoch}, step {})", steps + 1)),
                other => other,
            })?;
            report.step_losses.push(loss);
            loss_sum += loss;
            steps += 1;
        }
        report.total_steps += steps;

        let val = evaluate_cube(validation, &params, model)?;
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("validation metrics are not finite at epoch {epoch}: {val:?}")));
        }
        let improved = val.mpsnr_db > report.best_val_mpsnr;
        if improved {
            report.best_val_mpsnr = val.mpsnr_db;
            report.best_epoch = epoch;
            best_params = params.clone();
            if let Some(path) = &out.checkpoint {
                save_checkpoint(&params, model, path)?;
            }
        }
        let record = epoch_record(epoch, loss_sum / steps as f64, steps, &val, improved);
        if let Some(w) = report_file.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&record).expect("epoch record serializes"))?;
            w.flush()?;
        }
        report.epochs.push(record);
        report.stopped_epoch = epoch;
        if epoch - report.best_epoch >= cfg.patience {
            break;
        }
    }

    Ok(TrainOutcome {
        report,
        best_params,
        final_params: params,
    })
}

fn epoch_record(epoch: usize, train_loss: f64, steps: usize, val: &MetricReport, improved: bool) -> EpochRecord {
    EpochRecord {
        epoch,
        train_loss,
        steps,
        val_mpsnr_db: val.mpsnr_db,
        val_mssim: val.mssim,
        val_sam_deg: val.sam_deg,
        improved,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(h: usize, w: usize, b: usize) -> HsiCube {
        HsiCube::from_fn(h, w, b, |i, j, k| {
            let (x, y, z) = (i as f64 / h as f64, j as f64 / w as f64, k as f64 / b as f64);
            0.4 + 0.3 * (3.0 * x + z).sin() * (2.0 * y - z).cos()
        })
        .unwrap()
    }

    fn tiny() -> DsdcnConfig {
        DsdcnConfig {
            group_size: 4,
            group_overlap: 1,
            base_channels: 4,
            scale: 2,
            ..Default::default()
        }
    }

    #[test]
    fn protocol_holds_out_validation() {
        let data = DataConfig {
            dataset_kind: DatasetKind::PaviaULike,
            patch_size: 16,
            patch_stride: None,
        };
        let p = prepare_protocol(&cube(32, 32, 4), &data).unwrap();
        assert_eq!(p.test_origin, (0, 0));
        assert!(!p.train_origins.contains(&p.validation_origin));
        assert_eq!(p.train.len() + 1, 5);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let data = DataConfig {
            dataset_kind: DatasetKind::PaviaULike,
            patch_size: 16,
            patch_stride: None,
        };
        assert!(matches!(prepare_protocol(&cube(16, 16, 4), &data), Err(Error::Argument(_))));
        let r = train::<f64>(&tiny(), &TrainConfig::default(), &[], &cube(16, 16, 4), &TrainOutput::default());
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn frozen_model_stops_after_patience() {
        let cfg = TrainConfig {
            lr: 0.0,
            patience: 1,
            max_epochs: 10,
            ..Default::default()
        };
        let c = cube(16, 16, 6);
        let out = train::<f64>(&tiny(), &cfg, &[c.clone()], &c, &TrainOutput::default()).unwrap();
        assert_eq!(out.report.epochs.len(), 2);
        assert_eq!(out.report.best_epoch, 1);
        assert_eq!(out.best_params, out.final_params);
    }

    #[test]
    fn seeded_runs_agree() {
        let cfg = TrainConfig {
            max_epochs: 1,
            ..Default::default()
        };
        let c = cube(16, 16, 6);
        let a = train::<f64>(&tiny(), &cfg, &[c.clone()], &c, &TrainOutput::default()).unwrap();
        let b = train::<f64>(&tiny(), &cfg, &[c.clone()], &c, &TrainOutput::default()).unwrap();
        assert_eq!(a.report.step_losses, b.report.step_losses);
        assert_eq!(a.final_params, b.final_params);
    }
}
