//! Portable binary checkpoints.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic            8 bytes  "CONFGEN\0"
//! format_version   u32      currently 1
//! manifest_len     u64
//! manifest         manifest_len bytes of UTF-8 JSON:
//!                  {"format_version", "kind", "hyperparameters", "seed", "step"}
//! array_count      u64
//! array_count times:
//!   name_len       u32
//!   name           name_len bytes UTF-8
//!   ndim           u32
//!   extents        ndim x u64
//!   values         prod(extents) x f64
//! ```
//!
//! Parameter arrays use their parameter name. Adam moments are stored as
//! `adam.m/<name>` and `adam.v/<name>` so a resumed run continues exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CONFGEN\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
    pub step: u64,
}

fn put_array(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(
    kind: &str,
    hyperparameters: serde_json::Value,
    seed: u64,
    params: &ParameterStore,
) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        hyperparameters,
        seed,
        step: params.step(),
    };
    let manifest = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&((params.len() * 3) as u64).to_le_bytes());
    for e in params.entries() {
        put_array(&mut out, &e.name, &e.value);
    }
    for e in params.entries() {
        put_array(&mut out, &format!("adam.m/{}", e.name), &e.m);
        put_array(&mut out, &format!("adam.v/{}", e.name), &e.v);
    }
    Ok(out)
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    kind: &str,
    hyperparameters: serde_json::Value,
    seed: u64,
    params: &ParameterStore,
) -> Result<()> {
    let bytes = encode_checkpoint(kind, hyperparameters, seed, params)?;
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(Manifest, ParameterStore), String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let mlen = r.u64()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(mlen)?).map_err(|e| e.to_string())?;
    let count = r.u64()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| e.to_string())?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
    }
    let mut store = ParameterStore::new();
    let mut moments = Vec::new();
    for (name, t) in arrays {
        if name.starts_with("adam.m/") || name.starts_with("adam.v/") {
            moments.push((name, t));
        } else {
            store.insert(name, t).map_err(|e| e.to_string())?;
        }
    }
    for (name, t) in moments {
        let (kind, pname) = name.split_at(7);
        let entry = store
            .entry_mut(pname)
            .ok_or_else(|| format!("moment `{name}` for unknown parameter"))?;
        if t.dims() != entry.value.dims() {
            return Err(format!("moment `{name}` has wrong shape"));
        }
        if kind == "adam.m/" {
            entry.m = t;
        } else {
            entry.v = t;
        }
    }
    store.set_step(manifest.step);
    Ok((manifest, store))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(Manifest, ParameterStore)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::AdamConfig;

    #[test]
    fn round_trip_keeps_values_and_moments() {
        let mut p = ParameterStore::new();
        p.insert("w", Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.25]).unwrap())
            .unwrap();
        p.insert("b", Tensor::row(vec![0.1, 0.2])).unwrap();
        p.adam_step(
            &[Tensor::full(2, 2, 0.3), Tensor::row(vec![-1.0, 2.0])],
            &AdamConfig::default(),
        )
        .unwrap();
        let bytes = encode_checkpoint("test", serde_json::json!({"width": 2}), 9, &p).unwrap();
        let (m, q) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(m.kind, "test");
        assert_eq!(m.seed, 9);
        assert_eq!(m.step, 1);
        assert_eq!(q, p);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_checkpoint(b"nope").is_err());
        let mut p = ParameterStore::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        let bytes = encode_checkpoint("t", serde_json::Value::Null, 0, &p).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
