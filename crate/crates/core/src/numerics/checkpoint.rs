//! Flat binary container of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "AMPHCKPT"
//! version  u32      currently 1
//! dtype    u8       4 = f32, 8 = f64
//! count    u32      number of entries
//! entries  sorted by name, each:
//!   name_len u32, name (utf-8), ndim u32, dims u64 x ndim, values (dtype, LE)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::error::{NumericsError, Result};
use super::float::{DType, Float};
use super::params::ParamStore;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AMPHCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint<T: Float = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

fn bad(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl<T: Float> Checkpoint<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Every parameter of `store`, named `{prefix}{name}`.
    pub fn from_store(prefix: &str, store: &ParamStore<T>) -> Self {
        let mut ck = Self::new();
        ck.add_store(prefix, store);
        ck
    }

    pub fn add_store(&mut self, prefix: &str, store: &ParamStore<T>) {
        for p in store.iter() {
            self.entries
                .insert(format!("{prefix}{}", p.name()), p.value().clone());
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Copies `{prefix}{name}` into each parameter of `store`. Every parameter must be present.
    pub fn load_into(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|p| p.name().to_string()).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let t = self
                .entries
                .get(&key)
                .ok_or_else(|| bad(format!("missing entry `{key}`")))?;
            store.set_value(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let tag = r.take(1)?[0];
        match DType::from_tag(tag) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => return Err(bad(format!("stored as {d:?}, requested {:?}", T::DTYPE))),
            None => return Err(bad(format!("unknown dtype tag {tag}"))),
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("entry name is not utf-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("shape overflow"))?;
            let bytes = r.take(n.checked_mul(T::BYTES).ok_or_else(|| bad("size overflow"))?)?;
            let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
            if entries.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(bad(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
