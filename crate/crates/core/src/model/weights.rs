//! Binary weight container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DOLAWGT1"            8 bytes
//! format version              u32
//! config                      u64 byte length + UTF-8 JSON
//! tensor count                u64
//! per tensor:
//!     name                    u64 byte length + UTF-8
//!     dtype                   u8   (0 = f32, 1 = f16)
//!     rank                    u8
//!     dims                    u64 x rank
//!     offset                  u64  (relative to the data region)
//! zero padding up to the next 64-byte boundary of the file
//! data region                 each tensor starts on a 64-byte boundary
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use half::f16;
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError};

pub const MAGIC: &[u8; 8] = b"DOLAWGT1";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGNMENT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

/// A dense row-major tensor. Values are always held as f32 in memory; `dtype`
/// records the storage type used in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { dtype: DType::F32, shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Round the values to f16 and mark the tensor for f16 storage.
    pub fn into_f16(mut self) -> Self {
        for v in &mut self.data {
            *v = f16::from_f32(*v).to_f32();
        }
        self.dtype = DType::F16;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn encoded(&self) -> Vec<u8> {
        match self.dtype {
            DType::F32 => self.data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F16 => self
                .data
                .iter()
                .flat_map(|v| f16::from_f32(*v).to_le_bytes())
                .collect(),
        }
    }

    /// SHA-256 of the stored byte representation, hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.encoded());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Name-indexed tensor table in insertion order.
#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    tensors: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i].tensor = tensor,
            None => {
                self.index.insert(name.clone(), self.tensors.len());
                self.tensors.push(NamedTensor { name, tensor });
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i].tensor)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_position(&self, i: usize) -> &Tensor {
        &self.tensors[i].tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.numel()).sum()
    }

    /// Resident size of the f32 copies in bytes.
    pub fn resident_bytes(&self) -> usize {
        self.parameter_count() * std::mem::size_of::<f32>()
    }
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

/// Serialize a config plus tensor table in the container layout.
pub fn encode_weights(config: &ModelConfig, store: &WeightStore) -> Result<Vec<u8>, ModelError> {
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(config)?;
    header.extend_from_slice(&(json.len() as u64).to_le_bytes());
    header.extend_from_slice(&json);
    header.extend_from_slice(&(store.len() as u64).to_le_bytes());

    let mut offset = 0usize;
    let mut payloads = Vec::with_capacity(store.len());
    for nt in store.iter() {
        let bytes = nt.tensor.encoded();
        header.extend_from_slice(&(nt.name.len() as u64).to_le_bytes());
        header.extend_from_slice(nt.name.as_bytes());
        header.push(nt.tensor.dtype.code());
        header.push(nt.tensor.shape.len() as u8);
        for &d in &nt.tensor.shape {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&(offset as u64).to_le_bytes());
        offset = align_up(offset + bytes.len());
        payloads.push(bytes);
    }

    let data_start = align_up(header.len());
    let mut out = header;
    for bytes in payloads {
        let padded = data_start + align_up(out.len().saturating_sub(data_start));
        out.resize(padded, 0);
        out.extend_from_slice(&bytes);
    }
    out.resize(out.len().max(data_start), 0);
    Ok(out)
}

pub fn save_weights(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    store: &WeightStore,
) -> Result<(), ModelError> {
    let bytes = encode_weights(config, store)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(ModelError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_prefixed(&mut self) -> Result<&'a [u8], ModelError> {
        let n = usize::try_from(self.u64()?).map_err(|_| ModelError::Truncated)?;
        self.take(n)
    }
}

/// Parse the container into its config and tensor table. Structural checks
/// only; the tensor set is validated against the config by `Model`.
pub fn decode_weights(buf: &[u8]) -> Result<(ModelConfig, WeightStore), ModelError> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut cur = Cursor { buf, pos: MAGIC.len() };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let config: ModelConfig = serde_json::from_slice(cur.len_prefixed()?)?;
    let count = cur.u64()?;

    struct Record {
        name: String,
        dtype: DType,
        shape: Vec<usize>,
        offset: usize,
    }
    let mut records = Vec::new();
    for _ in 0..count {
        let name = std::str::from_utf8(cur.len_prefixed()?)
            .map_err(|_| ModelError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let code = cur.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| ModelError::Malformed(format!("unknown dtype {code} for {name}")))?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let offset = cur.u64()? as usize;
        records.push(Record { name, dtype, shape, offset });
    }

    let data_start = align_up(cur.pos);
    let mut store = WeightStore::new();
    for r in records {
        let numel: usize = r.shape.iter().product();
        let start = data_start
            .checked_add(r.offset)
            .ok_or(ModelError::Truncated)?;
        let end = start
            .checked_add(numel * r.dtype.size())
            .filter(|&e| e <= buf.len())
            .ok_or(ModelError::Truncated)?;
        let raw = &buf[start..end];
        let data = match r.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F16 => raw
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                .collect(),
        };
        store.insert(r.name, Tensor { dtype: r.dtype, shape: r.shape, data });
    }
    Ok((config, store))
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<(ModelConfig, WeightStore), ModelError> {
    let buf = fs::read(path)?;
    decode_weights(&buf)
}
