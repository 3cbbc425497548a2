//! Checkpoints: a small binary container holding the config, the variant
//! and every parameter tensor at full precision, so a reload reproduces
//! the model bit for bit.

use super::{AblationVariant, DeformTime, ModelConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DFTCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    variant: AblationVariant,
}

pub fn write_checkpoint_bytes(model: &DeformTime) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&Meta {
        config: model.config.clone(),
        variant: model.variant,
    })?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, tensor) in model.params.iter() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<DeformTime> {
    let mut r = bytes;
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            version
        )));
    }
    let meta_len = read_u32(&mut r)? as usize;
    if r.len() < meta_len {
        return Err(bad("truncated metadata"));
    }
    let meta: Meta = serde_json::from_slice(&r[..meta_len])?;
    r = &r[meta_len..];
    meta.config.validate()?;

    let count = read_u32(&mut r)? as usize;
    let mut params = ParameterStore::default();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        if r.len() < name_len {
            return Err(bad("truncated parameter name"));
        }
        let name = std::str::from_utf8(&r[..name_len])
            .map_err(|_| bad("parameter name is not utf-8"))?
            .to_string();
        r = &r[name_len..];
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(|_| bad("truncated shape"))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        if r.len() < numel * 8 {
            return Err(bad("truncated parameter data"));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in r[..numel * 8].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        r = &r[numel * 8..];
        params.insert(name, Tensor::new(shape, data)?);
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes after last parameter"));
    }

    let model = DeformTime {
        config: meta.config,
        variant: meta.variant,
        params,
    };
    check_structure(&model)?;
    Ok(model)
}

/// The stored parameter set must be exactly the set the config implies.
fn check_structure(model: &DeformTime) -> Result<()> {
    let reference = DeformTime::init(model.config.clone(), model.variant, 0)?;
    let expected: Vec<(&String, &[usize])> = reference
        .params
        .iter()
        .map(|(n, t)| (n, t.shape()))
        .collect();
    let actual: Vec<(&String, &[usize])> =
        model.params.iter().map(|(n, t)| (n, t.shape())).collect();
    if expected != actual {
        return Err(Error::Checkpoint(
            "parameter set does not match the stored config".into(),
        ));
    }
    Ok(())
}

pub fn save_checkpoint(model: &DeformTime, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_checkpoint_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DeformTime> {
    let bytes = std::fs::read(path)?;
    read_checkpoint_bytes(&bytes)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated integer field".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut &[u8]) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated integer field".into()))?;
    Ok(u16::from_le_bytes(b))
}
