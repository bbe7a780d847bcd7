//! `S2CT v1` tensor files and directory bundles.
//!
//! File layout, all integers little-endian:
//!
//! | bytes      | content                          |
//! |------------|----------------------------------|
//! | 0..4       | magic `S2CT`                     |
//! | 4          | version, always 1                |
//! | 5          | dtype (1 = f32, 2 = f64)         |
//! | 6          | rank (1..=4)                     |
//! | 7          | reserved, 0                      |
//! | 8..8+4r    | `u32` extents                    |
//! | rest       | row-major scalars                |
//!
//! A bundle is a directory holding `manifest.json` plus one file per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::tensor::{DType, Scalar, Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"S2CT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;
pub const MANIFEST: &str = "manifest.json";
const BUNDLE_FORMAT: &str = "s2ct-bundle";

/// A tensor whose element type is only known at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.dims(),
            DynTensor::F64(t) => t.dims(),
        }
    }

    /// Converts to `T`, rounding when narrowing f64 to f32.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for DynTensor {
    fn from(t: Tensor<f32>) -> Self {
        DynTensor::F32(t)
    }
}

impl From<Tensor<f64>> for DynTensor {
    fn from(t: Tensor<f64>) -> Self {
        DynTensor::F64(t)
    }
}

/// Wraps a generic tensor without conversion.
pub fn to_dyn<T: Scalar>(t: &Tensor<T>) -> DynTensor {
    match T::DTYPE {
        DType::F32 => DynTensor::F32(t.cast()),
        DType::F64 => DynTensor::F64(t.cast()),
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.rank() + T::DTYPE.size() * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    out.push(0);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn decode_as<T: Scalar>(dims: &[usize], payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload
        .chunks_exact(T::DTYPE.size())
        .map(T::read_le)
        .collect();
    Tensor::new(dims, data)
}

pub fn decode(bytes: &[u8]) -> Result<DynTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err(format!("truncated header ({} bytes)", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(fmt_err(format!("bad magic {:02x?}", &bytes[0..4])));
    }
    if bytes[4] != VERSION {
        return Err(fmt_err(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| fmt_err(format!("unsupported dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    if !(1..=MAX_RANK).contains(&rank) {
        return Err(fmt_err(format!("unsupported rank {rank}")));
    }
    if bytes[7] != 0 {
        return Err(fmt_err(format!(
            "reserved byte is {}, expected 0",
            bytes[7]
        )));
    }
    let dims_end = HEADER_LEN + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fmt_err("truncated extents"));
    }
    let dims: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fmt_err("extent product overflows"))?;
    let expected = count
        .checked_mul(dtype.size())
        .ok_or_else(|| fmt_err("payload size overflows"))?;
    let payload = &bytes[dims_end..];
    if payload.len() != expected {
        return Err(fmt_err(format!(
            "payload is {} bytes, dims {dims:?} of {dtype} need {expected}",
            payload.len()
        )));
    }
    let t = match dtype {
        DType::F32 => DynTensor::F32(decode_as(&dims, payload)?),
        DType::F64 => DynTensor::F64(decode_as(&dims, payload)?),
    };
    Ok(t)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load_dyn(path: impl AsRef<Path>) -> Result<DynTensor> {
    decode(&fs::read(path)?)
}

/// Loads a tensor that must already be stored as `T`.
pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let t = load_dyn(path)?;
    if t.dtype() != T::DTYPE {
        return Err(fmt_err(format!(
            "{} holds {}, expected {}",
            path.display(),
            t.dtype(),
            T::DTYPE
        )));
    }
    Ok(t.to())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    tensors: BTreeMap<String, String>,
    #[serde(default)]
    meta: Map<String, Value>,
}

/// Named tensors plus free-form JSON metadata, stored as a directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub tensors: BTreeMap<String, DynTensor>,
    pub meta: Map<String, Value>,
    path: Option<PathBuf>,
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.tensors.insert(name.to_owned(), to_dyn(t));
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<Value>) {
        self.meta.insert(key.to_owned(), value.into());
    }

    fn location(&self) -> PathBuf {
        self.path.clone().unwrap_or_default()
    }

    fn missing(&self, entry: &str) -> Error {
        Error::MissingEntry {
            entry: entry.to_owned(),
            path: self.location(),
        }
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .get(name)
            .map(DynTensor::to)
            .ok_or_else(|| self.missing(name))
    }

    pub fn tensor_opt<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        self.tensors.get(name).map(DynTensor::to)
    }

    pub fn meta_value(&self, key: &str) -> Result<&Value> {
        self.meta.get(key).ok_or_else(|| self.missing(key))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_value(key)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| fmt_err(format!("meta `{key}` is not a non-negative integer")))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();
        for (name, t) in &self.tensors {
            let file = format!("{name}.s2ct");
            let bytes = match t {
                DynTensor::F32(t) => encode(t),
                DynTensor::F64(t) => encode(t),
            };
            fs::write(dir.join(&file), bytes)?;
            files.insert(name.clone(), file);
        }
        let manifest = Manifest {
            format: BUNDLE_FORMAT.to_owned(),
            version: 1,
            tensors: files,
            meta: self.meta.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        fs::write(dir.join(MANIFEST), json)?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST);
        let raw = fs::read(&manifest_path)
            .map_err(|e| fmt_err(format!("cannot read {}: {e}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_slice(&raw)
            .map_err(|e| fmt_err(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format != BUNDLE_FORMAT || manifest.version != 1 {
            return Err(fmt_err(format!(
                "{}: unsupported bundle format {} v{}",
                manifest_path.display(),
                manifest.format,
                manifest.version
            )));
        }
        let mut tensors = BTreeMap::new();
        for (name, file) in manifest.tensors {
            let t = load_dyn(dir.join(&file))
                .map_err(|e| fmt_err(format!("entry `{name}` ({file}): {e}")))?;
            tensors.insert(name, t);
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
            path: Some(dir.to_path_buf()),
        })
    }
}
