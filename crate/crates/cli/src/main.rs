mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use dsdcn_core::data::{area_downsample, decode_cube, load_cube, save_cube, HsiCube};
use dsdcn_core::model::{DsdcnParams, Precision};
use dsdcn_core::train::{
    evaluate, evaluate_prediction, prepare_protocol, super_resolve_physical, train, AnyParams, Region, TrainOutput,
};
use dsdcn_core::{DType, Scalar};
use serde::Deserialize;
use serde_json::json;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "dsdcn", version, about = "Hyperspectral super-resolution: data prep, training, inference, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a headerless raw file plus JSON sidecar into an HSIC cube.
    Import {
        #[arg(long)]
        raw: PathBuf,
        /// Sidecar with h, w, b, dtype (u8|u16|i16|f32|f64) and interleave (bip|bil|bsq).
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Area-downsample a cube by 2, 4 or 8.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model on one cube under the patch protocol.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. --set train.lr=0.003 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the effective configuration and exit.
        #[arg(long)]
        dump_config: bool,
    },
    /// Super-resolve a low-resolution cube with a trained checkpoint.
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a checkpoint (or an existing prediction) against ground truth.
    Evaluate {
        #[arg(long, required_unless_present = "prediction", conflicts_with = "prediction")]
        checkpoint: Option<PathBuf>,
        /// Already super-resolved cube to score instead of running a model.
        #[arg(long)]
        prediction: Option<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, required_unless_present = "prediction")]
        scale: Option<usize>,
        /// Restrict scoring to row,col,height,width of the truth cube.
        #[arg(long)]
        region: Option<Region>,
    },
    /// Print the learnable parameter count with a per-block breakdown.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<dsdcn_core::Error>() {
                Some(dsdcn_core::Error::NonFinite(_)) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Import { raw, meta, output } => cmd_import(&raw, &meta, &output),
        Command::Degrade { input, scale, output } => cmd_degrade(&input, scale, &output),
        Command::Train {
            config,
            mut overrides,
            seed,
            dump_config,
        } => {
            if let Some(s) = seed {
                overrides.push(format!("train.seed={s}"));
            }
            let cfg = resolve_config(config.as_deref(), &overrides)?;
            if dump_config {
                println!("{}", cfg.to_flat_json());
                return Ok(());
            }
            cmd_train(&cfg)
        }
        Command::Sr {
            checkpoint,
            input,
            output,
        } => cmd_sr(&checkpoint, &input, &output),
        Command::Evaluate {
            checkpoint,
            prediction,
            truth,
            scale,
            region,
        } => {
            let report = match (checkpoint, prediction) {
                (Some(ckpt), None) => {
                    let scale = scale.ok_or_else(|| anyhow!("--scale is required with --checkpoint"))?;
                    evaluate(&ckpt, &truth, scale, region)?
                }
                (None, Some(pred)) => evaluate_prediction(&load_cube(&truth)?, &load_cube(&pred)?, region)?,
                _ => bail!("give exactly one of --checkpoint or --prediction"),
            };
            println!("{}", report.to_json());
            Ok(())
        }
        Command::Params {
            config,
            overrides,
            json,
        } => cmd_params(&resolve_config(config.as_deref(), &overrides)?, json),
    }
}

fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?),
        None => None,
    };
    RunConfig::resolve(text.as_deref(), overrides)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeta {
    h: usize,
    w: usize,
    b: usize,
    dtype: String,
    interleave: String,
}

fn cmd_import(raw: &Path, meta: &Path, output: &Path) -> Result<()> {
    let meta: RawMeta = serde_json::from_str(&fs::read_to_string(meta)?).context("reading sidecar")?;
    let bytes = fs::read(raw)?;
    let width = match meta.dtype.as_str() {
        "u8" => 1,
        "u16" | "i16" => 2,
        "f32" => 4,
        "f64" => 8,
        other => bail!("unsupported raw dtype {other:?}"),
    };
    let count = meta.h * meta.w * meta.b;
    if count == 0 || bytes.len() != count * width {
        bail!(
            "raw file has {} bytes, {}x{}x{} {} needs {}",
            bytes.len(),
            meta.h,
            meta.w,
            meta.b,
            meta.dtype,
            count * width
        );
    }
    let values: Vec<f64> = bytes
        .chunks_exact(width)
        .map(|c| match meta.dtype.as_str() {
            "u8" => c[0] as f64,
            "u16" => u16::from_le_bytes([c[0], c[1]]) as f64,
            "i16" => i16::from_le_bytes([c[0], c[1]]) as f64,
            "f32" => f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
            _ => f64::from_le_bytes(c.try_into().expect("8-byte chunk")),
        })
        .collect();
    let (h, w, b) = (meta.h, meta.w, meta.b);
    let index = |i: usize, j: usize, k: usize| -> Result<usize> {
        Ok(match meta.interleave.as_str() {
            "bip" => (i * w + j) * b + k,
            "bil" => (i * b + k) * w + j,
            "bsq" => (k * h + i) * w + j,
            other => bail!("unknown interleave {other:?} (expected bip, bil or bsq)"),
        })
    };
    index(0, 0, 0)?;
    let cube = HsiCube::from_fn(h, w, b, |i, j, k| values[index(i, j, k).expect("checked")])?;
    let dtype = if meta.dtype == "f32" { DType::F32 } else { DType::F64 };
    save_cube(&cube, output, dtype)?;
    println!("imported {h}x{w}x{b} -> {}", output.display());
    Ok(())
}

fn load_with_dtype(path: &Path) -> Result<(HsiCube, DType)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(decode_cube(&bytes)?)
}

fn cmd_degrade(input: &Path, scale: usize, output: &Path) -> Result<()> {
    if ![2, 4, 8].contains(&scale) {
        bail!("scale must be 2, 4 or 8, got {scale}");
    }
    let (cube, dtype) = load_with_dtype(input)?;
    let lr = area_downsample(&cube, scale)?;
    save_cube(&lr, output, dtype)?;
    let (h, w, b) = cube.dims();
    let (lh, lw, lb) = lr.dims();
    println!("{h}x{w}x{b} -> {lh}x{lw}x{lb}");
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let cube_path = cfg
        .data
        .cube
        .as_ref()
        .ok_or_else(|| anyhow!("missing required config key data.cube"))?;
    let cube = load_cube(cube_path).with_context(|| format!("data.cube: cannot load {}", cube_path.display()))?;
    let protocol = prepare_protocol(&cube, &cfg.data_config())?;
    let out = TrainOutput {
        checkpoint: cfg.output.checkpoint.clone(),
        report: cfg.output.report.clone(),
    };
    let tc = cfg.train_config();
    let report = match cfg.model.precision {
        Precision::F32 => train::<f32>(&cfg.model, &tc, &protocol.train, &protocol.validation, &out)?.report,
        Precision::F64 => train::<f64>(&cfg.model, &tc, &protocol.train, &protocol.validation, &out)?.report,
    };
    let summary = json!({
        "best_epoch": report.best_epoch,
        "best_val_mpsnr": report.best_val_mpsnr,
        "stopped_epoch": report.stopped_epoch,
        "total_steps": report.total_steps,
        "first_epoch_loss": report.epochs.first().map(|e| e.train_loss),
        "train_patches": protocol.train.len(),
        "validation_region": Region::square(protocol.validation_origin, protocol.patch_size).to_string(),
        "test_region": Region::square(protocol.test_origin, protocol.patch_size).to_string(),
        "checkpoint": cfg.output.checkpoint,
        "report": cfg.output.report,
    });
    println!("{summary}");
    Ok(())
}

fn cmd_sr(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let (params, config) = AnyParams::load(checkpoint)?;
    let (lr, dtype) = load_with_dtype(input)?;
    if lr.bands() < config.group_size {
        bail!(
            "input has {} bands but the checkpoint works on groups of {}",
            lr.bands(),
            config.group_size
        );
    }
    let hr = super_resolve_physical(&lr, &params, &config)?;
    if !hr.is_finite() {
        return Err(dsdcn_core::Error::NonFinite("super-resolved cube contains non-finite values".into()).into());
    }
    save_cube(&hr, output, dtype)?;
    let (h, w, b) = lr.dims();
    let (oh, ow, ob) = hr.dims();
    println!("{h}x{w}x{b} -> {oh}x{ow}x{ob}");
    Ok(())
}

fn cmd_params(cfg: &RunConfig, json: bool) -> Result<()> {
    let params = DsdcnParams::<f64>::zeros(&cfg.model)?;
    report_params(&params, json);
    Ok(())
}

fn report_params<T: Scalar>(params: &DsdcnParams<T>, json: bool) {
    let total = params.param_count();
    let parts = params.param_breakdown();
    if json {
        let blocks: Vec<_> = parts.iter().map(|(n, c)| json!({"block": n, "params": c})).collect();
        println!("{}", json!({"total": total, "blocks": blocks}));
    } else {
        for (name, count) in &parts {
            println!("{name:<12} {count:>10}");
        }
        println!("{:<12} {total:>10}", "total");
    }
}
