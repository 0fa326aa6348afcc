//! `EFD1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EFD1"  version:u32  count:u32
//! count × { name_len:u16 name role:u8 rank:u8 dims:u32×rank offset:u64 }
//! payload: f64 values, each tensor at its offset from the payload start
//! ```

use std::io::Write;
use std::path::Path;

use super::params::{ModelParams, Role};
use crate::bytes::Reader;
use crate::error::Result;
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"EFD1";
const VERSION: u32 = 1;

impl ModelParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for p in self.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.role.tag());
            out.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * p.value.len() as u64;
        }
        for p in self.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic, expected EFD1"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(4, &format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error(at as u64, "parameter name is not UTF-8"))?
                .to_owned();
            let at = r.pos;
            let role = Role::from_tag(r.u8()?)
                .ok_or_else(|| r.error(at as u64, "unknown parameter role"))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let at = r.pos;
            let offset = r.u64()?;
            manifest.push((name, role, shape, offset, at));
        }
        let payload = r.pos as u64;
        let mut params = ModelParams::new();
        let mut expected = 0u64;
        for (name, role, shape, offset, at) in manifest {
            if offset != expected {
                return Err(r.error(at as u64, &format!("offset {offset} for {name}, expected {expected}")));
            }
            let n: usize = shape.iter().product();
            r.pos = (payload + offset) as usize;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let value = Tensor::new(shape, data).map_err(|e| r.error(at as u64, &e.to_string()))?;
            params.push(name, role, value);
            expected += 8 * n as u64;
        }
        if (payload + expected) as usize != bytes.len() {
            return Err(r.error(payload + expected, "trailing bytes after payload"));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
