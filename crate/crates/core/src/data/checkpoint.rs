//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DIFC"  u32 version  u32 meta_len  meta_len bytes of JSON
//! u32 n_tensors
//! per tensor: u32 name_len, name (UTF-8), u32 rank, rank × u64 extents,
//!             u8 dtype tag (0 = f32, 1 = f64), payload
//! ```

use std::path::Path;

use serde_json::{Map, Value};

use super::io::{atomic_write, read_file, Cursor};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::numerics::Tensor;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"DIFC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    /// Converts to `T`, exactly when the stored dtype matches.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

/// Named tensors plus a JSON metadata object. The `component` metadata key
/// identifies what the checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Map<String, Value>,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn new(component: &str) -> Self {
        let mut meta = Map::new();
        meta.insert("component".into(), Value::String(component.into()));
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn component(&self) -> Option<&str> {
        self.meta.get("component").and_then(Value::as_str)
    }

    /// Fails with a contract error unless `component` matches.
    pub fn expect_component(&self, component: &str) -> Result<()> {
        match self.component() {
            Some(c) if c == component => Ok(()),
            other => Err(Error::Contract(format!(
                "checkpoint holds {other:?}, expected {component:?}"
            ))),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl serde::Serialize) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| Error::Config(e.to_string()))?;
        self.meta.insert(key.into(), v);
        Ok(())
    }

    pub fn meta_as<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Contract(format!("checkpoint metadata lacks {key:?}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("metadata {key:?}: {e}")))
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), StoredTensor::from_tensor(t)));
    }

    pub fn push_params<T: Scalar>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fills `params` from tensors named `prefix + name`.
    pub fn load_params<T: Scalar>(&self, prefix: &str, params: &mut ParamSet<T>) -> Result<()> {
        let converted: Vec<(String, Tensor<T>)> = self
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.clone(), t.to_tensor()))
            .collect();
        params.load_from(prefix, |key| converted.iter().find(|(n, _)| n == key).map(|(_, t)| t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.push(t.dtype().tag());
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, expected DIFC"));
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let meta_len = cur.u32("metadata length")? as usize;
        let meta_at = cur.pos;
        let meta: Value = serde_json::from_slice(cur.take(meta_len, "metadata")?)
            .map_err(|e| Error::format(meta_at, format!("metadata is not JSON: {e}")))?;
        let Value::Object(meta) = meta else {
            return Err(Error::format(meta_at, "metadata must be a JSON object"));
        };
        let count = cur.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = cur.u32("name length")? as usize;
            let name_at = cur.pos;
            let name = std::str::from_utf8(cur.take(name_len, "name")?)
                .map_err(|_| Error::format(name_at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = cur.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::format(cur.pos - 4, format!("rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut len: usize = 1;
            for _ in 0..rank {
                let at = cur.pos;
                let e = usize::try_from(cur.u64("extent")?)
                    .map_err(|_| Error::format(at, "extent overflows"))?;
                len = len.checked_mul(e).ok_or_else(|| Error::format(at, "tensor size overflows"))?;
                shape.push(e);
            }
            let tag_at = cur.pos;
            let dtype = DType::from_tag(cur.u8("dtype")?)
                .ok_or_else(|| Error::format(tag_at, "unknown dtype tag"))?;
            let nbytes = len
                .checked_mul(dtype.size_of())
                .ok_or_else(|| Error::format(tag_at, "tensor size overflows"))?;
            let payload = cur.take(nbytes, "payload")?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(read_payload(shape, payload)),
                DType::F64 => StoredTensor::F64(read_payload(shape, payload)),
            };
            tensors.push((name, t));
        }
        if cur.remaining() != 0 {
            return Err(Error::format(cur.pos, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

fn read_payload<T: Scalar>(shape: Vec<usize>, payload: &[u8]) -> Tensor<T> {
    let data = payload.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
    Tensor::new(shape, data).expect("length checked")
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    atomic_write(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?).map_err(|e| e.with_path(path))
}
