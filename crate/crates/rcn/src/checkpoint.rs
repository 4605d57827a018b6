//! Binary parameter files: magic `RCNCKPT1`, then per tensor a little-endian u32 name
//! length, the UTF-8 name, u32 rank, u32 dims and f64 values in row-major order, and a
//! trailing u32 CRC-32 of everything after the magic. A `<path>.cfg` sidecar holds the
//! run configuration the parameters belong to.

use std::path::{Path, PathBuf};

use crate::autodiff::ParamSet;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RCNCKPT1";

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut payload = Vec::new();
    for (name, p) in params.iter() {
        payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        payload.extend_from_slice(&(p.value.dims().len() as u32).to_le_bytes());
        for &d in p.value.dims() {
            payload.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in p.value.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos + 8)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parameters come back unfrozen.
pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let (payload, tail) = bytes[8..].split_at(bytes.len() - 12);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::Format("checkpoint CRC mismatch".into()));
    }
    let mut c = Cursor { buf: payload, pos: 0 };
    let mut params = ParamSet::new();
    while c.pos < payload.len() {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?.to_string();
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format(format!("{name}: dims overflow")))?;
        let raw = c.take(len.checked_mul(8).ok_or_else(|| Error::Format(format!("{name}: too large")))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        params.insert(name, Tensor::new(dims, data)?).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(params)
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn save(path: &Path, params: &ParamSet, cfg: &RunConfig) -> Result<()> {
    std::fs::write(path, encode(params))?;
    std::fs::write(sidecar(path), cfg.to_text())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet, RunConfig)> {
    let params = decode(&std::fs::read(path)?)?;
    let cfg = RunConfig::load(&sidecar(path))?;
    Ok((params, cfg))
}
