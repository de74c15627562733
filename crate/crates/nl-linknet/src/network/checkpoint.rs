//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//! magic `NLLK`, u16 version, config block (variant u8, pairwise kind u8,
//! width numerator u32, width denominator u32), u32 tensor count, then per
//! tensor: u16 name length + UTF-8 name, u8 rank, u64 dims, IEEE-754
//! single-precision data. Every named tensor of the model is stored,
//! batch-norm running statistics included, so save -> load -> save is
//! byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{build_model, Model, ModelConfig, Variant, Width};
use crate::error::{Error, Result};
use crate::nonlocal::PairwiseKind;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"NLLK";
const VERSION: u16 = 1;

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::Baseline => 0,
        Variant::Nl3 => 1,
        Variant::Nl4 => 2,
        Variant::Nl34 => 3,
    }
}

fn variant_from(code: u8) -> Result<Variant> {
    Ok(match code {
        0 => Variant::Baseline,
        1 => Variant::Nl3,
        2 => Variant::Nl4,
        3 => Variant::Nl34,
        other => {
            return Err(Error::CheckpointFormat(format!(
                "unknown variant code {other}"
            )))
        }
    })
}

fn kind_code(k: PairwiseKind) -> u8 {
    match k {
        PairwiseKind::DotProduct => 0,
        PairwiseKind::Gaussian => 1,
        PairwiseKind::EmbeddedGaussian => 2,
    }
}

fn kind_from(code: u8) -> Result<PairwiseKind> {
    Ok(match code {
        0 => PairwiseKind::DotProduct,
        1 => PairwiseKind::Gaussian,
        2 => PairwiseKind::EmbeddedGaussian,
        other => {
            return Err(Error::CheckpointFormat(format!(
                "unknown pairwise kind code {other}"
            )))
        }
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::CheckpointFormat("truncated checkpoint".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = model.config();
    w.write_all(&[variant_code(cfg.variant), kind_code(cfg.kind)])?;
    w.write_all(&cfg.width.num.to_le_bytes())?;
    w.write_all(&cfg.width.den.to_le_bytes())?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for p in model.params() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[4u8])?;
        for d in p.value.shape().0 {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct RawCheckpoint {
    variant: Variant,
    kind: PairwiseKind,
    width: Width,
    tensors: Vec<(String, Tensor<f32>)>,
}

fn read_raw(path: &Path) -> Result<RawCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {magic:?}, not a model checkpoint"
        )));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut codes = [0u8; 2];
    read_exact(&mut r, &mut codes)?;
    let variant = variant_from(codes[0])?;
    let kind = kind_from(codes[1])?;
    let width = Width::new(read_u32(&mut r)?, read_u32(&mut r)?)?;
    let count = read_u32(&mut r)? as usize;

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        if rank[0] != 4 {
            return Err(Error::CheckpointFormat(format!(
                "tensor {name} has rank {}, expected 4",
                rank[0]
            )));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = read_u64(&mut r)? as usize;
        }
        let shape = Shape(dims);
        let mut data = vec![0f32; shape.numel()];
        for v in data.iter_mut() {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b)?;
            *v = f32::from_le_bytes(b);
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(RawCheckpoint {
        variant,
        kind,
        width,
        tensors,
    })
}

fn fill_model(model: &mut Model<f32>, raw: RawCheckpoint) -> Result<()> {
    let expected = model.params().len();
    if raw.tensors.len() != expected {
        return Err(Error::CheckpointShape(format!(
            "checkpoint holds {} tensors, model has {expected}",
            raw.tensors.len()
        )));
    }
    for (name, tensor) in raw.tensors {
        let slot = model.param_mut(&name).ok_or_else(|| {
            Error::CheckpointShape(format!("checkpoint tensor {name} has no slot in the model"))
        })?;
        if slot.shape() != tensor.shape() {
            return Err(Error::CheckpointShape(format!(
                "tensor {name} has shape {}, model expects {}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    Ok(())
}

/// Rebuild a model from a checkpoint, trusting the embedded config.
pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let raw = read_raw(path)?;
    let config = ModelConfig::new(raw.variant, raw.kind, raw.width, 0);
    let mut model = build_model(&config)?;
    fill_model(&mut model, raw)?;
    Ok(model)
}

/// Load a checkpoint into a caller-specified configuration; any deviation
/// between the file and the requested architecture is an error.
pub fn load_checkpoint_into(path: &Path, config: &ModelConfig) -> Result<Model<f32>> {
    let raw = read_raw(path)?;
    if raw.variant != config.variant || raw.kind != config.kind || raw.width != config.width {
        return Err(Error::CheckpointShape(format!(
            "checkpoint is {}/{}/width {}, requested {}/{}/width {}",
            raw.variant.name(),
            raw.kind.name(),
            raw.width,
            config.variant.name(),
            config.kind.name(),
            config.width
        )));
    }
    let mut model = build_model(config)?;
    fill_model(&mut model, raw)?;
    Ok(model)
}
