//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "GDLLCKPT"
//! version      u32
//! blob_len     u32
//! blob         blob_len bytes of JSON: kind, seed, arch, adam_step
//! tensor_count u32
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes UTF-8
//!   rank       u32
//!   dims       rank x u64
//!   data       prod(dims) x f64 (IEEE-754 bit patterns)
//! ```
//!
//! Floats are stored as raw bit patterns, so save followed by load is
//! bit-exact. Optimizer moments ride along as tensors named
//! `adam.m.<param>` / `adam.v.<param>`.

use super::Tensor;
use crate::error::GdlError;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 8] = *b"GDLLCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bounds that keep a corrupted header from driving absurd
/// allocations.
const MAX_BLOB_LEN: u32 = 1 << 20;
const MAX_TENSORS: u32 = 1 << 16;
const MAX_NAME_LEN: u32 = 1 << 10;
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfigBlob {
    kind: String,
    seed: u64,
    arch: serde_json::Value,
    adam_step: Option<u64>,
}

/// A deserialized checkpoint: identity metadata plus named tensors in their
/// stored order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// What the tensors parameterize (e.g. `"teacher-lm"`, `"denoiser"`).
    pub kind: String,
    /// Seed of the run that produced the weights.
    pub seed: u64,
    /// Architecture (or other caller-defined) configuration.
    pub arch: serde_json::Value,
    /// Optimizer step count when mid-training state is included.
    pub adam_step: Option<u64>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let blob = serde_json::to_vec(&ConfigBlob {
            kind: self.kind.clone(),
            seed: self.seed,
            arch: self.arch.clone(),
            adam_step: self.adam_step,
        })?;
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(blob.len() as u32).to_le_bytes())?;
        w.write_all(&blob)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
            for &dim in &tensor.shape {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &x in &tensor.data {
                w.write_all(&x.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Checkpoint> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(GdlError::CheckpointFormat(format!(
                "bad magic {:02x?}, expected {:02x?}",
                magic, MAGIC
            )));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(GdlError::CheckpointFormat(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let blob_len = read_u32(&mut r)?;
        if blob_len > MAX_BLOB_LEN {
            return Err(GdlError::CheckpointFormat(format!(
                "config blob of {blob_len} bytes exceeds limit"
            )));
        }
        let mut blob = vec![0u8; blob_len as usize];
        r.read_exact(&mut blob)?;
        let config: ConfigBlob = serde_json::from_slice(&blob)?;

        let count = read_u32(&mut r)?;
        if count > MAX_TENSORS {
            return Err(GdlError::CheckpointFormat(format!(
                "{count} tensors exceeds limit"
            )));
        }
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)?;
            if name_len > MAX_NAME_LEN {
                return Err(GdlError::CheckpointFormat(format!(
                    "tensor name of {name_len} bytes exceeds limit"
                )));
            }
            let mut name_bytes = vec![0u8; name_len as usize];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes).map_err(|e| {
                GdlError::CheckpointFormat(format!("tensor name is not UTF-8: {e}"))
            })?;
            let rank = read_u32(&mut r)?;
            if rank > MAX_RANK {
                return Err(GdlError::CheckpointFormat(format!(
                    "tensor rank {rank} exceeds limit"
                )));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                shape.push(u64::from_le_bytes(buf) as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > (1 << 28) {
                return Err(GdlError::CheckpointFormat(format!(
                    "tensor {name} with {numel} elements exceeds limit"
                )));
            }
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_bits(u64::from_le_bytes(buf)));
            }
            tensors.push((name, Tensor { shape, data }));
        }
        Ok(Checkpoint {
            kind: config.kind,
            seed: config.seed,
            arch: config.arch,
            adam_step: config.adam_step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        use std::io::Write as _;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path)?;
        Checkpoint::read_from(std::io::BufReader::new(file))
    }

    /// The tensor with the given name, if present.
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors that are model parameters (not optimizer moments).
    pub fn param_tensors(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.tensors.iter().filter(|(n, _)| !n.starts_with("adam."))
    }

    /// Tensors that are optimizer moments.
    pub fn adam_tensors(&self) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with("adam."))
            .cloned()
            .collect()
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Packs a parameter set (and optionally Adam state) into a checkpoint.
pub fn pack<P: super::ParamSet>(
    kind: &str,
    seed: u64,
    arch: serde_json::Value,
    params: &P,
    adam: Option<&super::adam::AdamState>,
) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = params
        .tensor_names()
        .into_iter()
        .map(|name| {
            let t = params
                .tensor(&name)
                .expect("declared tensor exists")
                .clone();
            (name, t)
        })
        .collect();
    let adam_step = adam.map(|state| {
        tensors.extend(state.export_tensors(params));
        state.step
    });
    Checkpoint {
        kind: kind.to_string(),
        seed,
        arch,
        adam_step,
        tensors,
    }
}

/// Copies checkpoint tensors into an existing parameter set, requiring an
/// exact name and shape match for every declared parameter.
pub fn unpack_into<P: super::ParamSet>(ckpt: &Checkpoint, params: &mut P) -> Result<()> {
    for name in params.tensor_names() {
        let stored = ckpt.tensor(&name).ok_or_else(|| {
            GdlError::CheckpointFormat(format!("checkpoint is missing tensor {name}"))
        })?;
        let dst = params.tensor_mut(&name).expect("declared tensor exists");
        if dst.shape != stored.shape {
            return Err(GdlError::CheckpointFormat(format!(
                "tensor {name} has shape {:?} in checkpoint, expected {:?}",
                stored.shape, dst.shape
            )));
        }
        dst.data.copy_from_slice(&stored.data);
    }
    Ok(())
}
