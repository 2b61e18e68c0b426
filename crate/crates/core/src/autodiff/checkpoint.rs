//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "MNRFCKPT"
//! version    u32       = 1
//! meta_len   u64
//! meta       meta_len bytes, UTF-8 JSON
//! n_params   u32
//! repeated n_params times:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims u64 × ndim
//!   step     u64       Adam step counter
//!   values   f64 × numel
//!   m        f64 × numel   Adam first moment
//!   v        f64 × numel   Adam second moment
//! ```
//!
//! Gradients are not stored.

use std::io::{Read, Write};

use thiserror::Error;

use super::{ParamStore, Parameter, Tensor};

pub const MAGIC: &[u8; 8] = b"MNRFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("parameter {name}: expected shape {expected:?}, checkpoint has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write(w: &mut impl Write, store: &ParamStore, meta: &str) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&p.step.to_le_bytes())?;
        put_f64s(w, p.value.data())?;
        put_f64s(w, &p.m)?;
        put_f64s(w, &p.v)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, CheckpointError> {
        let mut b = vec![0u8; n];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| CheckpointError::Malformed(format!("truncated ({e})")))?;
        Ok(b)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let b = self.bytes(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn string(&mut self, n: usize) -> Result<String, CheckpointError> {
        String::from_utf8(self.bytes(n)?)
            .map_err(|_| CheckpointError::Malformed("invalid utf-8".into()))
    }
}

/// Reads a checkpoint into a fresh store plus its metadata string.
pub fn read(r: impl Read) -> Result<(ParamStore, String), CheckpointError> {
    let mut rd = Reader { inner: r };
    if rd.bytes(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta_len = rd.u64()? as usize;
    let meta = rd.string(meta_len)?;
    let n = rd.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name_len = rd.u32()? as usize;
        let name = rd.string(name_len)?;
        let ndim = rd.u32()? as usize;
        if ndim > 8 {
            return Err(CheckpointError::Malformed(format!("{name}: ndim {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| rd.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let step = rd.u64()?;
        let values = rd.f64s(numel)?;
        let m = rd.f64s(numel)?;
        let v = rd.f64s(numel)?;
        let id = store.add(name, Tensor::new(shape, values));
        let p: &mut Parameter = store.get_mut(id);
        p.m = m;
        p.v = v;
        p.step = step;
    }
    Ok((store, meta))
}

/// Copies values and optimizer state from `loaded` into `target` by name,
/// checking every shape.
pub fn restore(target: &mut ParamStore, loaded: &ParamStore) -> Result<(), CheckpointError> {
    for p in target.iter_mut() {
        let id = loaded
            .find(&p.name)
            .ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
        let src = loaded.get(id);
        if src.value.shape() != p.value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: p.name.clone(),
                expected: p.value.shape().to_vec(),
                found: src.value.shape().to_vec(),
            });
        }
        p.value = src.value.clone();
        p.m = src.m.clone();
        p.v = src.v.clone();
        p.step = src.step;
    }
    Ok(())
}
