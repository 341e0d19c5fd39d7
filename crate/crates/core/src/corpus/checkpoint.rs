use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::autodiff::{DType, Real, Tensor};
use crate::error::{Error, Result};
use crate::towers::{ModelConfig, Params, TwoTowerModel};

pub const MAGIC: &[u8; 4] = b"TCDL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a TCDL checkpoint)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("truncated file inside {what}")]
    Truncated { what: String },
    #[error("tensor {tensor}: dims {dims:?} disagree with a representable data length")]
    DataLength { tensor: String, dims: Vec<u64> },
    #[error("tensor {tensor}: unknown dtype byte {byte}")]
    DType { tensor: String, byte: u8 },
    #[error("tensor {tensor} is stored as {stored:?}, requested {wanted:?}")]
    DTypeMismatch { tensor: String, stored: DType, wanted: DType },
    #[error("{what} is not valid UTF-8")]
    Utf8 { what: String },
    #[error("{0} trailing bytes after the config blob")]
    TrailingBytes(usize),
    #[error("config blob: {0}")]
    Config(String),
}

/// A tensor as stored, in its on-disk element type.
#[derive(Clone, Debug, PartialEq)]
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

    fn from_real<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    fn into_real<T: Real>(self, name: &str) -> std::result::Result<Tensor<T>, CheckpointError> {
        if self.dtype() != T::DTYPE {
            return Err(CheckpointError::DTypeMismatch { tensor: name.into(), stored: self.dtype(), wanted: T::DTYPE });
        }
        Ok(match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        })
    }
}

/// Named tensor table plus a JSON config blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: IndexMap<String, StoredTensor>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &TwoTowerModel<T>) -> Self {
        Checkpoint {
            tensors: model.params.iter().map(|(k, v)| (k.to_string(), StoredTensor::from_real(v))).collect(),
            config: serde_json::to_value(&model.config).expect("config serializes"),
        }
    }

    pub fn into_model<T: Real>(self) -> Result<TwoTowerModel<T>> {
        let config: ModelConfig =
            serde_json::from_value(self.config).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let mut params = Params::new();
        for (name, t) in self.tensors {
            let t = t.into_real(&name)?;
            params.insert(name, t);
        }
        TwoTowerModel::from_params(config, params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(t.dtype() as u8);
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        let blob = serde_json::to_vec(&self.config).expect("json value serializes");
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "header").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let found = r.u32("header")?;
        if found != FORMAT_VERSION {
            return Err(CheckpointError::Version { found });
        }
        let count = r.u32("header")?;
        let mut tensors = IndexMap::new();
        for i in 0..count {
            let what = format!("tensor #{i} name");
            let len = r.u32(&what)? as usize;
            let name = std::str::from_utf8(r.take(len, &what)?)
                .map_err(|_| CheckpointError::Utf8 { what: what.clone() })?
                .to_string();
            let rank = r.u32(&name)? as usize;
            let dims = (0..rank).map(|_| r.u64(&name)).collect::<std::result::Result<Vec<u64>, _>>()?;
            let byte = r.take(1, &name)?[0];
            let dtype = DType::from_byte(byte).ok_or_else(|| CheckpointError::DType { tensor: name.clone(), byte })?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| usize::try_from(d).ok().and_then(|d| acc.checked_mul(d)))
                .filter(|n| n.checked_mul(dtype.size()).is_some())
                .ok_or_else(|| CheckpointError::DataLength { tensor: name.clone(), dims: dims.clone() })?;
            let data = r.take(numel * dtype.size(), &name)?;
            let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
            let t = match dtype {
                DType::F32 => StoredTensor::F32(decode(&shape, data)),
                DType::F64 => StoredTensor::F64(decode(&shape, data)),
            };
            tensors.insert(name, t);
        }
        let len = r.u32("config")? as usize;
        let blob = r.take(len, "config")?;
        let text = std::str::from_utf8(blob).map_err(|_| CheckpointError::Utf8 { what: "config".into() })?;
        let config = serde_json::from_str(text).map_err(|e| CheckpointError::Config(e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint { tensors, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

fn decode<T: Real>(shape: &[usize], data: &[u8]) -> Tensor<T> {
    let size = T::DTYPE.size();
    Tensor::new(shape, data.chunks_exact(size).map(T::read_le).collect()).expect("length checked against dims")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated { what: what.to_string() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint<T: Real>(model: &TwoTowerModel<T>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<TwoTowerModel<T>> {
    Checkpoint::load(path)?.into_model()
}
