//! Checkpoint format: magic `ICNT`, u32 version (1), u32 tensor count, then
//! per tensor a u16 name length, the UTF-8 name, a dtype byte (0 = f32,
//! 1 = f64), a rank byte, rank u32 dims and the little-endian payload;
//! a CRC-32 of all preceding bytes closes the file. The iteration counter
//! and config hash ride along as reserved `meta/` tensors.

use std::path::Path;

use super::TrainableModel;
use crate::arch::IcnetConfig;
use crate::error::{CheckpointError, Result};
use crate::tensor::{DType, Element};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICNT";
const VERSION: u32 = 1;
const META_ITERATION: &str = "meta/iteration";
const META_CONFIG_HASH: &str = "meta/config_hash";

/// FNV-1a over a canonical config string.
pub fn config_hash_str(s: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

pub fn config_hash(cfg: &IcnetConfig) -> u64 {
    config_hash_str(&cfg.canonical_string())
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u16(&mut self, v: u16) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor_record<E: Element>(&mut self, name: &str, dims: [u32; 4], data: &[E]) {
        self.u16(name.len() as u16);
        self.bytes.extend_from_slice(name.as_bytes());
        self.bytes.push(E::DTYPE.byte());
        self.bytes.push(4);
        for d in dims {
            self.u32(d);
        }
        for &v in data {
            v.write_le(&mut self.bytes);
        }
    }
}

/// Save every parameter and running statistic plus the iteration counter
/// and config hash.
pub fn save_checkpoint<E: Element, M: TrainableModel<E>>(path: &Path, model: &M, iteration: u64) -> Result<()> {
    let mut names = Vec::new();
    model.visit_params(&mut |name, _, _| names.push(name.to_string()));
    let count = names.len() as u32 + 2;

    let mut w = Writer { bytes: Vec::new() };
    w.bytes.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(VERSION);
    w.u32(count);
    // Bit patterns travel through the f64 payload unchanged.
    w.tensor_record::<f64>(META_ITERATION, [1, 1, 1, 1], &[f64::from_bits(iteration)]);
    w.tensor_record::<f64>(META_CONFIG_HASH, [1, 1, 1, 1], &[f64::from_bits(model.config_hash())]);
    model.visit_params(&mut |name, _, t| {
        let s = t.shape().as_array();
        w.tensor_record(name, [s[0] as u32, s[1] as u32, s[2] as u32, s[3] as u32], t.data());
    });

    let crc = crc32fast::hash(&w.bytes);
    w.u32(crc);
    std::fs::write(path, w.bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { offset: self.pos });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct RawTensor {
    dtype: DType,
    dims: [u32; 4],
    payload: Vec<u8>,
}

/// Load a checkpoint into an already-built model. Every stored tensor must
/// match the model by name, dtype and dims, and the stored config hash must
/// equal the model's. Returns the stored iteration counter.
pub fn load_checkpoint<E: Element, M: TrainableModel<E>>(path: &Path, model: &mut M) -> Result<u64> {
    load_impl(path, model, true)
}

/// Like [`load_checkpoint`] but adopting the stored dims per tensor, which
/// is how pruned models (whose channel counts no longer match the build
/// configuration) are reloaded. Names, dtypes and the config hash must
/// still match.
pub fn load_checkpoint_flexible<E: Element, M: TrainableModel<E>>(path: &Path, model: &mut M) -> Result<u64> {
    load_impl(path, model, false)
}

fn load_impl<E: Element, M: TrainableModel<E>>(path: &Path, model: &mut M, strict_dims: bool) -> Result<u64> {
    let bytes = std::fs::read(path)?;
    // CRC first: no partial model escapes a corrupt file.
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated { offset: bytes.len() }.into());
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed }.into());
    }

    let mut r = Reader { bytes: body, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: [magic[0], magic[1], magic[2], magic[3]] }.into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { expected: VERSION, found: version }.into());
    }
    let count = r.u32()? as usize;

    let mut tensors = std::collections::BTreeMap::<String, RawTensor>::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name_pos = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName { offset: name_pos })?
            .to_string();
        let dtype_byte = r.take(1)?[0];
        let dtype = DType::from_byte(dtype_byte).ok_or(CheckpointError::BadDtype(dtype_byte))?;
        let rank = r.take(1)?[0] as usize;
        let mut dims = [1u32; 4];
        let mut elems = 1usize;
        for i in 0..rank {
            let d = r.u32()?;
            if i < 4 {
                dims[i] = d;
            }
            elems *= d as usize;
        }
        let payload = r.take(elems * dtype.size())?.to_vec();
        tensors.insert(name, RawTensor { dtype, dims, payload });
    }

    let read_meta = |name: &str| -> std::result::Result<u64, CheckpointError> {
        let t = tensors.get(name).ok_or_else(|| CheckpointError::MissingTensor(name.into()))?;
        if t.dtype != DType::F64 || t.payload.len() != 8 {
            return Err(CheckpointError::DtypeMismatch {
                name: name.into(),
                expected: DType::F64,
                found: t.dtype,
            });
        }
        Ok(f64::read_le(&t.payload).to_bits())
    };
    let iteration = read_meta(META_ITERATION)?;
    let found_hash = read_meta(META_CONFIG_HASH)?;
    let expected_hash = model.config_hash();
    if found_hash != expected_hash {
        return Err(CheckpointError::ConfigHash { expected: expected_hash, found: found_hash }.into());
    }

    // Apply, verifying coverage both ways.
    let mut missing: Option<String> = None;
    let mut mismatch: Option<CheckpointError> = None;
    let mut used = std::collections::BTreeSet::<String>::new();
    used.insert(META_ITERATION.into());
    used.insert(META_CONFIG_HASH.into());
    model.visit_params_mut(&mut |name, _, t| {
        if missing.is_some() || mismatch.is_some() {
            return;
        }
        let Some(raw) = tensors.get(name) else {
            missing = Some(name.to_string());
            return;
        };
        used.insert(name.to_string());
        if raw.dtype != E::DTYPE {
            mismatch = Some(CheckpointError::DtypeMismatch {
                name: name.into(),
                expected: E::DTYPE,
                found: raw.dtype,
            });
            return;
        }
        let s = t.shape().as_array();
        let want = [s[0] as u32, s[1] as u32, s[2] as u32, s[3] as u32];
        let size = E::DTYPE.size();
        if raw.dims != want {
            if strict_dims {
                mismatch = Some(CheckpointError::DimsMismatch {
                    name: name.into(),
                    expected: want,
                    found: raw.dims,
                });
                return;
            }
            let shape = crate::tensor::Shape::new(
                raw.dims[0] as usize,
                raw.dims[1] as usize,
                raw.dims[2] as usize,
                raw.dims[3] as usize,
            );
            let data: Vec<E> = (0..shape.count())
                .map(|i| E::read_le(&raw.payload[i * size..(i + 1) * size]))
                .collect();
            match crate::tensor::Tensor::new(shape, data) {
                Ok(new_t) => *t = new_t,
                Err(_) => {
                    mismatch = Some(CheckpointError::DimsMismatch {
                        name: name.into(),
                        expected: want,
                        found: raw.dims,
                    })
                }
            }
            return;
        }
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = E::read_le(&raw.payload[i * size..(i + 1) * size]);
        }
    });
    if let Some(name) = missing {
        return Err(CheckpointError::MissingTensor(name).into());
    }
    if let Some(err) = mismatch {
        return Err(err.into());
    }
    for name in tensors.keys() {
        if !used.contains(name) {
            return Err(CheckpointError::UnknownTensor(name.clone()).into());
        }
    }
    Ok(iteration)
}
