//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "PRETRCK1" (trajectory model) or "PRETRCM1" (token model)
//! version    u32      1
//! header     u32 length + UTF-8 JSON; for the trajectory model
//!            {"config": ModelConfig, "dtype": "f32"|"f64", "metadata": {..}}
//! count      u32      number of parameters
//! per parameter, in registration order:
//!   name     u16 length + UTF-8
//!   rank     u8, then rank × u64 dims
//!   values   f64 little-endian, row-major
//!   crc32    u32 over the value bytes
//! crc32      u32 over every preceding byte
//! ```
//!
//! All integers are little-endian. Values are stored as f64 regardless of the
//! model's scalar type, so an f32 model round-trips exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::scalar::Scalar;

use super::config::ModelConfig;
use super::pretr::Pretr;

const MAGIC: &[u8; 8] = b"PRETRCK1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    metadata: BTreeMap<String, String>,
}

/// A decoded checkpoint; parameters are held in f64.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub dtype: String,
    pub metadata: BTreeMap<String, String>,
    pub params: ParamStore<f64>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Pretr<T>, metadata: BTreeMap<String, String>) -> Self {
        Self { config: model.config, dtype: T::DTYPE.to_string(), metadata, params: model.params.cast() }
    }

    pub fn into_model<T: Scalar>(self) -> Result<Pretr<T>> {
        Pretr::from_params(self.config, self.params.cast())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header { config: self.config, dtype: self.dtype.clone(), metadata: self.metadata.clone() };
        encode_archive(MAGIC, &header, &self.params)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, params): (Header, _) = decode_archive(MAGIC, bytes)?;
        Ok(Self { config: header.config, dtype: header.dtype, metadata: header.metadata, params })
    }
}

/// Writes a JSON header and named f64 arrays in the layout documented above.
pub(crate) fn encode_archive<H: Serialize>(magic: &[u8; 8], header: &H, params: &ParamStore<f64>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + params.numel() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(header)?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let start = out.len();
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub(crate) fn decode_archive<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(H, ParamStore<f64>)> {
    if bytes.len() < magic.len() + 8 || &bytes[..8] != magic {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: H = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        if crc32fast::hash(raw) != r.u32()? {
            return Err(Error::Checkpoint(format!("checksum mismatch in parameter {name}")));
        }
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(name, Tensor::new(&shape, data)?)?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok((header, params))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &Pretr<T>,
    metadata: BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = Checkpoint::from_model(model, metadata).encode()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
