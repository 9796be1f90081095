//! Versioned parameter files shared by every network in the crate.
//!
//! Layout (little-endian): magic `RDAPTCKP`, `u32` version, `u32` metadata
//! length, metadata JSON, `u32` parameter count, then per parameter `u32` name
//! length, name bytes, `u32` rank, `u32` dims, `f64` values.

use std::fs;
use std::path::Path;

use reidapt_autodiff::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ReidError, Result};

const MAGIC: &[u8; 8] = b"RDAPTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training metadata stored next to the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_history: Vec<f64>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(meta: &CheckpointMeta, params: &ParamSet) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    put_u32(&mut out, params.len());
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        t.shape().iter().for_each(|&d| put_u32(&mut out, d));
        t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ReidError::corrupt(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(CheckpointMeta, ParamSet)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(ReidError::corrupt(path, "not a checkpoint file"));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(ReidError::CheckpointVersion { path: path.into(), found: version, expected: CHECKPOINT_VERSION });
    }
    let len = r.u32()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(len)?).map_err(|e| ReidError::corrupt(path, format!("metadata: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ReidError::corrupt(path, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| ReidError::corrupt(path, "shape overflow"))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| ReidError::corrupt(path, "shape overflow"))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| ReidError::corrupt(path, format!("{name}: {e}")))?;
        if params.id_of(&name).is_some() {
            return Err(ReidError::corrupt(path, format!("duplicate parameter {name}")));
        }
        params.insert(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(ReidError::corrupt(path, "trailing bytes"));
    }
    Ok((meta, params))
}

/// Writes through a temporary file so a crash never leaves a half checkpoint.
pub fn save(path: &Path, meta: &CheckpointMeta, params: &ParamSet) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(meta, params)).map_err(|e| ReidError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ReidError::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| ReidError::io(path, e))?;
    decode(&bytes, path)
}

/// SHA-256 over parameter names, shapes and values.
pub fn params_hash(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        t.shape().iter().for_each(|&d| h.update((d as u64).to_le_bytes()));
        t.data().iter().for_each(|v| h.update(v.to_le_bytes()));
    }
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| ReidError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
