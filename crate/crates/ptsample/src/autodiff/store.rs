//! Named parameter collections with deterministic ordering, checkpoint I/O,
//! and content checksums.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{StatUpdate, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"APSW";
const VERSION: u16 = 1;

/// Batch-norm running statistics live in the same store as trainable weights
/// so checkpoints carry them, but the optimizer must never step them.
pub fn is_running_stat(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

/// Map from parameter name to tensor. Iteration order is the sorted name
/// order, so every traversal is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid_argument(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid_argument(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// All entries in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Entries the optimizer may update, in sorted name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(name, _)| !is_running_stat(name))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable().map(|(n, _)| n.to_string()).collect()
    }

    /// Total element count over trainable tensors.
    pub fn num_trainable_values(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Adds `grads` (name, per-element gradient) into the stored gradient
    /// buffers, allocating them on first use.
    pub fn accumulate_grads<'a>(
        &mut self,
        grads: impl Iterator<Item = (&'a str, &'a [f64])>,
    ) -> Result<()> {
        for (name, g) in grads {
            let t = self.get_mut(name)?;
            if g.len() != t.numel() {
                return Err(Error::invalid_argument(format!(
                    "gradient length {} does not match parameter '{}' ({})",
                    g.len(),
                    name,
                    t.numel()
                )));
            }
            let buf = t.grad_mut();
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// Folds deferred batch-statistics records into the running-stat
    /// tensors, in recording order:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) -> Result<()> {
        for u in updates {
            for (suffix, batch) in [
                ("running_mean", &u.batch_mean),
                ("running_var", &u.batch_var),
            ] {
                let name = format!("{}.{suffix}", u.prefix);
                let t = self.get_mut(&name)?;
                if t.numel() != batch.len() {
                    return Err(Error::invalid_argument(format!(
                        "statistics update for '{name}' has {} values, tensor has {}",
                        batch.len(),
                        t.numel()
                    )));
                }
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = u.momentum * *r + (1.0 - u.momentum) * b;
                }
            }
        }
        Ok(())
    }

    /// Deep copy for later bit-exact restore.
    pub fn snapshot(&self) -> ParamStore {
        self.clone()
    }

    /// Serializes to the binary checkpoint layout: magic, version u16,
    /// count u32, then per parameter name (u16 length + UTF-8), rank u8,
    /// dims u32 each, and f64 little-endian values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, "bad magic, expected APSW"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::format(
                4,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let count = r.u32("parameter count")?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name_off = r.pos;
            let name_bytes = r.take(name_len, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::format(name_off as u64, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(
                    r.take(8, "value")?.try_into().unwrap(),
                ));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ParamStore { params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    /// FNV-1a hash over the canonical serialization. Used to verify that
    /// frozen networks stay bit-identical across training runs.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
