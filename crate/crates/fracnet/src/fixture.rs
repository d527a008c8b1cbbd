//! Portable binary tensor format and the multi-tensor checkpoint container.
//!
//! Single-tensor records are bit-exact by construction:
//!
//! ```text
//! "TNSR" | version u8 = 1 | dtype u8 (0=f32, 1=f64, 2=u8) | rank u8
//!        | rank x extent u64 LE | row-major payload LE
//! ```
//!
//! Checkpoints concatenate named records behind an index header:
//!
//! ```text
//! "TNSC" | version u8 = 1 | arch_hash u64 LE | count u32 LE
//!        | count x (name_len u16 LE | name utf8 | payload_len u64 LE)
//!        | payloads (each a TNSR record, in index order)
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use crate::params::Params;
use crate::tensor::{Dtype, Scalar, Tensor};

const TNSR_MAGIC: &[u8; 4] = b"TNSR";
const TNSC_MAGIC: &[u8; 4] = b"TNSC";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("dtype {found:?} does not match requested {requested:?}")]
    DtypeMismatch { found: Dtype, requested: Dtype },
    #[error("payload length {found} does not match shape {shape:?}")]
    PayloadMismatch { found: usize, shape: Vec<usize> },
    #[error("container entry {0} missing from parameter store")]
    UnknownEntry(String),
    #[error("container has {found} entries, parameter store expects {expected}")]
    EntryCountMismatch { found: usize, expected: usize },
    #[error("entry {name}: shape {found:?} does not match expected {expected:?}")]
    EntryShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("architecture hash mismatch: container {found:#018x}, expected {expected:#018x}")]
    ArchHashMismatch { found: u64, expected: u64 },
    #[error("malformed container: {0}")]
    Malformed(String),
}

/// An undecoded tensor record, covering all three wire dtypes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<E: Scalar>(t: &Tensor<E>) -> Self {
        let mut payload = Vec::with_capacity(t.numel() * E::DTYPE.size_bytes());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        Self {
            dtype: E::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn from_u8(shape: &[usize], data: &[u8]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            dtype: Dtype::U8,
            shape: shape.to_vec(),
            payload: data.to_vec(),
        }
    }

    /// Decodes into a float tensor of exactly the stored dtype.
    pub fn to_tensor<E: Scalar>(&self) -> Result<Tensor<E>, FixtureError> {
        if self.dtype != E::DTYPE {
            return Err(FixtureError::DtypeMismatch {
                found: self.dtype,
                requested: E::DTYPE,
            });
        }
        let width = self.dtype.size_bytes();
        let data: Vec<E> = self
            .payload
            .chunks_exact(width)
            .map(|c| E::read_le(c))
            .collect();
        Tensor::from_vec(&self.shape, data).map_err(|_| FixtureError::PayloadMismatch {
            found: self.payload.len(),
            shape: self.shape.clone(),
        })
    }

    pub fn to_u8(&self) -> Result<Vec<u8>, FixtureError> {
        if self.dtype != Dtype::U8 {
            return Err(FixtureError::DtypeMismatch {
                found: self.dtype,
                requested: Dtype::U8,
            });
        }
        Ok(self.payload.clone())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), FixtureError> {
        let numel: usize = self.shape.iter().product();
        if numel * self.dtype.size_bytes() != self.payload.len() {
            return Err(FixtureError::PayloadMismatch {
                found: self.payload.len(),
                shape: self.shape.clone(),
            });
        }
        w.write_all(TNSR_MAGIC)?;
        w.write_all(&[VERSION, self.dtype.code(), self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&self.payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, FixtureError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TNSR_MAGIC {
            return Err(FixtureError::BadMagic { expected: "TNSR" });
        }
        let mut head = [0u8; 3];
        r.read_exact(&mut head)?;
        if head[0] != VERSION {
            return Err(FixtureError::UnsupportedVersion(head[0]));
        }
        let dtype = Dtype::from_code(head[1]).ok_or(FixtureError::UnknownDtype(head[1]))?;
        let rank = head[2] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * dtype.size_bytes()];
        r.read_exact(&mut payload)?;
        Ok(Self {
            dtype,
            shape,
            payload,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("in-memory write");
        out
    }
}

/// FNV-1a 64-bit hash; used to fingerprint the architecture document a
/// checkpoint was saved against.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Writes named tensors in order behind an index header.
pub fn write_container<W: Write>(
    w: &mut W,
    arch_hash: u64,
    entries: &[(String, RawTensor)],
) -> Result<(), FixtureError> {
    w.write_all(TNSC_MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&arch_hash.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    let payloads: Vec<Vec<u8>> = entries.iter().map(|(_, t)| t.to_bytes()).collect();
    for ((name, _), payload) in entries.iter().zip(&payloads) {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(payload.len() as u64).to_le_bytes())?;
    }
    for payload in &payloads {
        w.write_all(payload)?;
    }
    Ok(())
}

/// Reads a container back as (arch_hash, named tensors in stored order).
pub fn read_container<R: Read>(r: &mut R) -> Result<(u64, Vec<(String, RawTensor)>), FixtureError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TNSC_MAGIC {
        return Err(FixtureError::BadMagic { expected: "TNSC" });
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(FixtureError::UnsupportedVersion(version[0]));
    }
    let mut hash_buf = [0u8; 8];
    r.read_exact(&mut hash_buf)?;
    let arch_hash = u64::from_le_bytes(hash_buf);
    let mut count_buf = [0u8; 4];
    r.read_exact(&mut count_buf)?;
    let count = u32::from_le_bytes(count_buf) as usize;

    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len_buf = [0u8; 2];
        r.read_exact(&mut len_buf)?;
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| FixtureError::Malformed("entry name is not utf8".into()))?;
        let mut plen_buf = [0u8; 8];
        r.read_exact(&mut plen_buf)?;
        index.push((name, u64::from_le_bytes(plen_buf) as usize));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, plen) in index {
        let mut payload = vec![0u8; plen];
        r.read_exact(&mut payload)?;
        let tensor = RawTensor::read_from(&mut payload.as_slice())?;
        entries.push((name, tensor));
    }
    Ok((arch_hash, entries))
}

/// Serializes a parameter store, entries in insertion order.
pub fn write_params<E: Scalar, W: Write>(
    w: &mut W,
    arch_hash: u64,
    params: &Params<E>,
) -> Result<(), FixtureError> {
    let entries: Vec<(String, RawTensor)> = params
        .iter()
        .map(|(_, e)| (e.name.clone(), RawTensor::from_tensor(&e.tensor)))
        .collect();
    write_container(w, arch_hash, &entries)
}

/// Loads saved values into an existing store built from the same model spec.
/// Every entry must match by name and shape; extra or missing entries reject.
pub fn read_params_into<E: Scalar, R: Read>(
    r: &mut R,
    expected_hash: Option<u64>,
    params: &mut Params<E>,
) -> Result<(), FixtureError> {
    let (arch_hash, entries) = read_container(r)?;
    if let Some(expected) = expected_hash {
        if arch_hash != expected {
            return Err(FixtureError::ArchHashMismatch {
                found: arch_hash,
                expected,
            });
        }
    }
    if entries.len() != params.len() {
        return Err(FixtureError::EntryCountMismatch {
            found: entries.len(),
            expected: params.len(),
        });
    }
    let mut seen = std::collections::HashSet::with_capacity(entries.len());
    for (name, raw) in entries {
        if !seen.insert(name.clone()) {
            return Err(FixtureError::Malformed(format!("duplicate entry {name}")));
        }
        let id = params
            .id(&name)
            .map_err(|_| FixtureError::UnknownEntry(name.clone()))?;
        let expected_shape = params.get(id).shape().to_vec();
        if raw.shape != expected_shape {
            return Err(FixtureError::EntryShapeMismatch {
                name,
                found: raw.shape,
                expected: expected_shape,
            });
        }
        let tensor: Tensor<E> = raw.to_tensor()?;
        params
            .set_data(id, tensor.data())
            .map_err(|_| FixtureError::Malformed(format!("entry {name} has wrong length")))?;
    }
    Ok(())
}
