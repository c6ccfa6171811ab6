//! Binary checkpoint format.
//!
//! ```text
//! magic "DSDCN\0" | u16 version | u32 len | config JSON
//! u32 tensor count
//! per tensor: u16 name len | name | u8 dtype tag | u8 rank | rank x u32 dims | LE data
//! ```
//!
//! Every kernel is stored as two tensors, `<name>.weight` (rank 4) and
//! `<name>.bias` (rank 1), in canonical layer order.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{DsdcnConfig, DsdcnParams};
use crate::tensor::{read_le, write_le, DType, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"DSDCN\0";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint<T: Scalar>(params: &DsdcnParams<T>, config: &DsdcnConfig) -> Result<Vec<u8>> {
    config.validate()?;
    params.check_layout(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(config).map_err(|e| Error::Internal(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);

    let named = params.named();
    out.extend_from_slice(&((named.len() * 2) as u32).to_le_bytes());
    for (_, name, k) in named {
        let dims = k.weight.shape().dims();
        write_tensor(&mut out, &format!("{name}.weight"), &dims, k.weight.data());
        write_tensor(&mut out, &format!("{name}.bias"), &[k.bias.len()], &k.bias);
    }
    Ok(out)
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[T]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    write_le(data, T::DTYPE, out);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Corrupt(format!("truncated while reading {what}")).into()),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_header(r: &mut Reader) -> Result<DsdcnConfig> {
    let magic = r.take(CHECKPOINT_MAGIC.len(), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Corrupt("not a checkpoint (bad magic)".into()).into());
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let len = r.u32("config length")? as usize;
    let json = r.take(len, "config")?;
    let config: DsdcnConfig =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    config
        .validate()
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    Ok(config)
}

/// Decode into parameters of element type `T`, converting the stored
/// precision if it differs.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(DsdcnParams<T>, DsdcnConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    let config = read_header(&mut r)?;
    let mut params = DsdcnParams::<T>::zeros(&config)?;
    let count = r.u32("tensor count")? as usize;
    let expected: Vec<String> = params.named().into_iter().map(|(_, n, _)| n).collect();
    if count != expected.len() * 2 {
        return Err(CheckpointError::ShapeMismatch(format!(
            "checkpoint holds {count} tensors, config implies {}",
            expected.len() * 2
        ))
        .into());
    }
    for (name, kernel) in expected.iter().zip(params.kernels_mut()) {
        let wdims = kernel.weight.shape().dims();
        read_tensor(&mut r, &format!("{name}.weight"), &wdims, kernel.weight.data_mut())?;
        let blen = kernel.bias.len();
        read_tensor(&mut r, &format!("{name}.bias"), &[blen], &mut kernel.bias)?;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }
    Ok((params, config))
}

fn read_tensor<T: Scalar>(r: &mut Reader, name: &str, dims: &[usize], dst: &mut [T]) -> Result<()> {
    let nlen = r.u16("tensor name length")? as usize;
    let found = r.take(nlen, "tensor name")?;
    if found != name.as_bytes() {
        return Err(CheckpointError::ShapeMismatch(format!(
            "expected tensor {name}, found {}",
            String::from_utf8_lossy(found)
        ))
        .into());
    }
    let tag = r.u8("dtype")?;
    let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::Corrupt(format!("{name}: dtype tag {tag}")))?;
    let rank = r.u8("rank")? as usize;
    let mut stored = Vec::with_capacity(rank);
    for _ in 0..rank {
        stored.push(r.u32("dims")? as usize);
    }
    if stored != dims {
        return Err(CheckpointError::ShapeMismatch(format!("{name}: stored {stored:?}, expected {dims:?}")).into());
    }
    let raw = r.take(dst.len() * dtype.size(), name)?;
    dst.copy_from_slice(&read_le::<T>(raw, dtype));
    Ok(())
}

/// Read only the configuration, e.g. to pick the precision before loading.
pub fn read_checkpoint_config(path: impl AsRef<Path>) -> Result<DsdcnConfig> {
    let bytes = fs::read(path)?;
    read_header(&mut Reader { bytes: &bytes, pos: 0 })
}

pub fn save_checkpoint<T: Scalar>(params: &DsdcnParams<T>, config: &DsdcnConfig, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(params, config)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(DsdcnParams<T>, DsdcnConfig)> {
    decode_checkpoint(&fs::read(path)?)
}
