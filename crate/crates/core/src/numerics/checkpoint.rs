//! Versioned binary container for model parameters and metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CDDMCKPT" | u32 version
//! u32 n_meta   { str key | str value }*
//! u32 n_tensor { str path | u32 ndim | u64 dim* | f64 value* }*
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8. Metadata is kept
//! sorted by key so identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::binio::{put_reals, put_str, put_u32, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CDDMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const ACCUMULATOR_PREFIX: &str = "optim.rmsprop.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures every parameter and, for trainable ones, its RMSprop accumulator.
    pub fn from_store(store: &ParamStore) -> Self {
        let mut tensors = Vec::new();
        for (_, p) in store.iter() {
            tensors.push((p.path.clone(), p.tensor.clone()));
        }
        for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
            tensors.push((format!("{ACCUMULATOR_PREFIX}{}", p.path), p.accumulator.clone()));
        }
        Checkpoint {
            meta: BTreeMap::new(),
            tensors,
        }
    }

    pub fn tensor(&self, path: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(p, _)| p == path).map(|(_, t)| t)
    }

    /// Loads values into a store built with the same architecture.
    pub fn restore_store(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let path = store.param(id).path.clone();
            let t = self
                .tensor(&path)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{path}`")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Dimension {
                    op: "checkpoint parameter",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *store.get_mut(id) = t.clone();
            if let Some(acc) = self.tensor(&format!("{ACCUMULATOR_PREFIX}{path}")) {
                store.params_mut()[id.0].accumulator = acc.clone();
            }
        }
        Ok(())
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let s = self.meta_str(key)?;
        s.parse()
            .map_err(|_| Error::Config(format!("checkpoint metadata `{key}` = `{s}` is malformed")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (path, t) in &self.tensors {
            put_str(&mut out, path);
            put_reals(&mut out, t.shape(), t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, origin);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let mut tensors = Vec::new();
        for _ in 0..r.u32()? {
            let path = r.string()?;
            let (shape, data) = r.reals()?;
            tensors.push((path, Tensor::new(&shape, data)?));
        }
        r.finish()?;
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
