//! Binary checkpoint: magic, header (version, config echo, manifest),
//! little-endian payload and a trailing payload checksum.
//!
//! ```text
//! "BCNV1\0"
//! u32 version
//! u32 config_len, config bytes (UTF-8)
//! u32 tensor_count
//!   u16 name_len, name bytes, u8 dtype, u8 rank, rank x u64 dims
//! u64 payload_len, payload
//! u64 checksum (first 8 bytes of SHA-256(payload), little-endian)
//! ```

use std::io::Write;
use std::path::Path;

use ptl_core::params::ParamStore;
use ptl_core::{DType, Float, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 6] = b"BCNV1\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl ManifestEntry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().fold(self.dtype.size_in_bytes(), |a, &d| a.saturating_mul(d))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub manifest: Vec<ManifestEntry>,
    pub payload: Vec<u8>,
}

pub fn checksum(payload: &[u8]) -> u64 {
    let digest = Sha256::digest(payload);
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}

fn encode<T: Float>(v: T, out: &mut Vec<u8>) {
    match T::DTYPE {
        DType::F32 => out.extend((v.as_f64() as f32).to_le_bytes()),
        DType::F64 => out.extend(v.as_f64().to_le_bytes()),
    }
}

fn decode<T: Float>(dtype: DType, bytes: &[u8]) -> Vec<T> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CliError::Load(format!("truncated file while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    /// Captures every parameter of `store` in store order.
    pub fn from_store<T: Float>(config: &str, store: &ParamStore<T>) -> Self {
        let mut manifest = Vec::with_capacity(store.len());
        let mut payload = Vec::with_capacity(store.scalar_count() * T::DTYPE.size_in_bytes());
        for (name, t) in store.iter() {
            manifest.push(ManifestEntry {
                name: name.to_string(),
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
            });
            t.data().iter().for_each(|&v| encode(v, &mut payload));
        }
        Self {
            config: config.to_string(),
            manifest,
            payload,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload.len() + 1024);
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.config.len() as u32).to_le_bytes());
        out.extend(self.config.as_bytes());
        out.extend((self.manifest.len() as u32).to_le_bytes());
        for e in &self.manifest {
            out.extend((e.name.len() as u16).to_le_bytes());
            out.extend(e.name.as_bytes());
            out.push(e.dtype.tag());
            out.push(e.shape.len() as u8);
            e.shape.iter().for_each(|&d| out.extend((d as u64).to_le_bytes()));
        }
        out.extend((self.payload.len() as u64).to_le_bytes());
        out.extend(&self.payload);
        out.extend(checksum(&self.payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(CliError::Load("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CliError::Load(format!("unsupported version {version}")));
        }
        let config_len = r.u32("config length")? as usize;
        let config = std::str::from_utf8(r.take(config_len, "config")?)
            .map_err(|_| CliError::Load("config echo is not UTF-8".into()))?
            .to_string();
        let count = r.u32("tensor count")? as usize;
        let mut manifest = Vec::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| CliError::Load("tensor name is not UTF-8".into()))?
                .to_string();
            let tag = r.u8("dtype")?;
            let dtype = DType::from_tag(tag).ok_or_else(|| CliError::Load(format!("{name}: unknown dtype tag {tag}")))?;
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            manifest.push(ManifestEntry { name, dtype, shape });
        }
        let payload_len = r.u64("payload length")? as usize;
        let payload = r.take(payload_len, "payload")?.to_vec();
        let stored = r.u64("checksum")?;
        if r.pos != bytes.len() {
            return Err(CliError::Load(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if checksum(&payload) != stored {
            return Err(CliError::Load("payload checksum mismatch".into()));
        }
        let expected = manifest.iter().fold(0usize, |a, e| a.saturating_add(e.byte_len()));
        if expected != payload_len {
            return Err(CliError::Load(format!(
                "manifest describes {expected} payload bytes, file holds {payload_len}"
            )));
        }
        Ok(Self {
            config,
            manifest,
            payload,
        })
    }

    /// Writes to a temporary file in the target directory, then renames it
    /// into place, so a reader never sees a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
        tmp.write_all(&self.to_bytes()).map_err(|e| CliError::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
        tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Load(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Decodes every tensor, converting to `T` if stored at another precision.
    pub fn tensors<T: Float>(&self) -> Result<Vec<(String, Tensor<T>)>> {
        let mut offset = 0;
        self.manifest
            .iter()
            .map(|e| {
                let n = e.byte_len();
                let data = decode::<T>(e.dtype, &self.payload[offset..offset + n]);
                offset += n;
                let t = Tensor::new(&e.shape, data).map_err(|err| CliError::Load(format!("{}: {err}", e.name)))?;
                Ok((e.name.clone(), t))
            })
            .collect()
    }

    /// Copies every tensor into `store`. The manifest must name exactly the
    /// store's tensors with the same shapes; otherwise every mismatch is listed.
    pub fn apply_to<T: Float>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut problems = Vec::new();
        for e in &self.manifest {
            match store.find(&e.name) {
                None => problems.push(format!("{} not in model", e.name)),
                Some(id) if store.get(id).shape() != e.shape.as_slice() => problems.push(format!(
                    "{}: checkpoint {:?} vs model {:?}",
                    e.name,
                    e.shape,
                    store.get(id).shape()
                )),
                Some(_) => {}
            }
        }
        for name in store.names() {
            if !self.manifest.iter().any(|e| &e.name == name) {
                problems.push(format!("{name} missing from checkpoint"));
            }
        }
        if !problems.is_empty() {
            return Err(CliError::Load(format!("topology mismatch: {}", problems.join("; "))));
        }
        for (name, t) in self.tensors::<T>()? {
            store.assign(&name, t)?;
        }
        Ok(())
    }
}
