//! Single-file model archive shared by every checkpoint type.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"ZSCARCH\0"
//! layout       u32       archive layout revision (currently 1)
//! version      u32 len + UTF-8   e.g. "zsc-counter/1"
//! config       u32 len + UTF-8   TOML snapshot of the model configuration
//! n_arrays     u32
//! per array:
//!   name       u32 len + UTF-8
//!   dtype      u8        1 = f64
//!   ndim       u32
//!   dims       ndim x u64
//!   data       prod(dims) x f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Param;

const MAGIC: &[u8; 8] = b"ZSCARCH\0";
const LAYOUT: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub version: String,
    pub config: String,
    pub arrays: Vec<Param>,
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&LAYOUT.to_le_bytes());
        put_str(&mut out, &self.version);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.push(DTYPE_F64);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let layout = get_u32(&mut r)?;
        if layout != LAYOUT {
            return Err(Error::format("checkpoint", format!("unsupported layout {layout}")));
        }
        let version = get_str(&mut r)?;
        let config = get_str(&mut r)?;
        let n = get_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = get_str(&mut r)?;
            let mut tag = [0u8; 1];
            read_exact(&mut r, &mut tag)?;
            if tag[0] != DTYPE_F64 {
                return Err(Error::format("checkpoint", format!("unknown dtype tag {}", tag[0])));
            }
            let ndim = get_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let len: usize = shape.iter().product();
            if len * 8 > r.len() {
                return Err(Error::format("checkpoint", format!("array `{name}` truncated")));
            }
            let data = r[..len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[len * 8..];
            arrays.push(Param { name, shape, data });
        }
        if !r.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Archive {
            version,
            config,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Checks the version string, returning the config snapshot.
    pub fn expect_version(&self, version: &str) -> Result<&str> {
        if self.version != version {
            return Err(Error::format(
                "checkpoint",
                format!("expected `{version}`, found `{}`", self.version),
            ));
        }
        Ok(&self.config)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format("checkpoint", "unexpected end of data"))
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > r.len() {
        return Err(Error::format("checkpoint", "string length past end"));
    }
    let s = std::str::from_utf8(&r[..n])
        .map_err(|e| Error::format("checkpoint", e.to_string()))?
        .to_owned();
    *r = &r[n..];
    Ok(s)
}
