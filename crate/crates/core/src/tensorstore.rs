//! Reading and writing checkpoints in the safetensors container format.
//!
//! ```text
//! [u64 LE header length N][N bytes of UTF-8 JSON][raw little-endian tensor data]
//! ```
//!
//! The writer is canonical: header keys are emitted in lexicographic order,
//! tensor data is laid out in the same order, and the header is padded with
//! spaces to an 8-byte boundary. Two saves of the same [`TensorMap`] are
//! therefore byte-identical.
//!
//! Half-precision tensors keep their raw bits; they are widened only when a
//! caller asks for typed values through [`Tensor::to_vec`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use half::{bf16, f16};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Upper bound on the JSON header, in bytes.
pub const MAX_HEADER_BYTES: u64 = 100 * 1024 * 1024;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "F64" => Some(DType::F64),
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One header entry: where a tensor's bytes live in the data region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// `[start, end)` relative to the end of the header.
    pub byte_range: (u64, u64),
}

impl TensorSpec {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A dense tensor with its raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected = shape.iter().product::<usize>() * dtype.byte_width();
        if data.len() != expected {
            return Err(Error::BadTensor {
                name: String::new(),
                reason: format!(
                    "{} data bytes for shape {:?} of {} (expected {})",
                    data.len(),
                    shape,
                    dtype,
                    expected
                ),
            });
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Tensor {
            dtype: DType::F32,
            shape,
            data,
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Tensor {
            dtype: DType::F64,
            shape,
            data,
        }
    }

    pub fn from_scalars<S: Scalar>(shape: Vec<usize>, values: &[S]) -> Self {
        let wide: Vec<f64> = values.iter().map(|v| v.as_f64()).collect();
        Self::encode(S::DTYPE, shape, &wide)
    }

    /// Encode `values` into `dtype`, rounding to nearest where the dtype is narrower.
    pub fn encode(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let mut data = Vec::with_capacity(values.len() * dtype.byte_width());
        for &v in values {
            match dtype {
                DType::F64 => data.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => data.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F16 => data.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
                DType::BF16 => data.extend_from_slice(&bf16::from_f64(v).to_le_bytes()),
            }
        }
        Tensor { dtype, shape, data }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decode to compute scalars. F16/BF16 are widened through `f32`.
    pub fn to_vec<S: Scalar>(&self) -> Vec<S> {
        match self.dtype {
            DType::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| S::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| S::from_f32_exact(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            DType::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| S::from_f32_exact(f16::from_le_bytes([c[0], c[1]]).to_f32()))
                .collect(),
            DType::BF16 => self
                .data
                .chunks_exact(2)
                .map(|c| S::from_f32_exact(bf16::from_le_bytes([c[0], c[1]]).to_f32()))
                .collect(),
        }
    }
}

/// Named tensors plus string metadata. Iteration order is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a new tensor; fails if the name is taken or reserved.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::EmptyName);
        }
        if name == METADATA_KEY || self.tensors.contains_key(&name) {
            return Err(Error::NameCollision(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Insert or overwrite.
    pub fn replace(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    /// Sum of element counts over every tensor.
    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::num_elements).sum()
    }

    /// Header entries in data order, as [`to_bytes`](Self::to_bytes) would write them.
    pub fn specs(&self) -> Vec<TensorSpec> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let start = offset;
                offset += t.data.len() as u64;
                TensorSpec {
                    name: name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    byte_range: (start, offset),
                }
            })
            .collect()
    }

    /// Canonical container bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            let meta: Map<String, Value> = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        }
        for spec in self.specs() {
            if spec.name.is_empty() {
                return Err(Error::EmptyName);
            }
            if spec.name == METADATA_KEY {
                return Err(Error::NameCollision(spec.name));
            }
            let mut entry = Map::new();
            entry.insert("dtype".into(), Value::String(spec.dtype.as_str().into()));
            entry.insert("shape".into(), Value::from(spec.shape.clone()));
            entry.insert(
                "data_offsets".into(),
                Value::from(vec![spec.byte_range.0, spec.byte_range.1]),
            );
            header.insert(spec.name, Value::Object(entry));
        }
        let mut json = serde_json::to_vec(&Value::Object(header))?;
        while json.len() % 8 != 0 {
            json.push(b' ');
        }
        let data_len: usize = self.tensors.values().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(8 + json.len() + data_len);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = read_header(bytes)?;
        let data = &bytes[header.data_start..];
        let mut map = TensorMap {
            tensors: BTreeMap::new(),
            metadata: header.metadata,
        };
        for spec in header.specs {
            let (s, e) = (spec.byte_range.0 as usize, spec.byte_range.1 as usize);
            let tensor = Tensor {
                dtype: spec.dtype,
                shape: spec.shape,
                data: data[s..e].to_vec(),
            };
            map.insert(spec.name, tensor)?;
        }
        Ok(map)
    }
}

/// Parsed and validated container header.
#[derive(Debug, Clone)]
pub struct Header {
    /// Entries sorted by data offset.
    pub specs: Vec<TensorSpec>,
    pub metadata: BTreeMap<String, String>,
    /// Absolute offset of the data region.
    pub data_start: usize,
}

/// Parse and validate the header of a container held in memory.
///
/// Rejects headers whose tensor byte ranges overlap, leave gaps, run past the
/// end of the file, or disagree with the declared shape and dtype.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 8 {
        return Err(Error::MissingHeaderLength(bytes.len()));
    }
    let declared = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if declared > MAX_HEADER_BYTES {
        return Err(Error::HeaderTooLarge(declared));
    }
    let available = (bytes.len() - 8) as u64;
    if declared > available {
        return Err(Error::TruncatedHeader {
            declared,
            available,
        });
    }
    let data_start = 8 + declared as usize;
    let text = std::str::from_utf8(&bytes[8..data_start])
        .map_err(|e| Error::HeaderParse(format!("header is not UTF-8: {e}")))?;
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::HeaderParse(e.to_string()))?;
    let Value::Object(root) = root else {
        return Err(Error::HeaderParse("header is not a JSON object".into()));
    };

    let mut metadata = BTreeMap::new();
    let mut specs = Vec::with_capacity(root.len());
    for (name, entry) in root {
        if name == METADATA_KEY {
            let Value::Object(meta) = entry else {
                return Err(Error::HeaderParse("__metadata__ is not an object".into()));
            };
            for (k, v) in meta {
                let Value::String(v) = v else {
                    return Err(Error::HeaderParse(format!(
                        "metadata value for {k} is not a string"
                    )));
                };
                metadata.insert(k, v);
            }
            continue;
        }
        specs.push(parse_entry(name, &entry)?);
    }

    let data_len = available - declared;
    specs.sort_by(|a, b| a.byte_range.cmp(&b.byte_range).then(a.name.cmp(&b.name)));
    let mut cursor = 0u64;
    for spec in &specs {
        let (start, end) = spec.byte_range;
        if end > data_len {
            return Err(Error::BadByteRange {
                name: spec.name.clone(),
                start,
                end,
                reason: format!("past the end of the {data_len}-byte data region"),
            });
        }
        if start < cursor {
            return Err(Error::OverlappingTensor(spec.name.clone()));
        }
        if start > cursor {
            return Err(Error::GapBeforeTensor(spec.name.clone()));
        }
        cursor = end;
    }
    if cursor != data_len {
        return Err(Error::TrailingData(data_len - cursor));
    }
    Ok(Header {
        specs,
        metadata,
        data_start,
    })
}

fn parse_entry(name: String, entry: &Value) -> Result<TensorSpec> {
    let bad = |what: &str| Error::HeaderParse(format!("tensor {name}: {what}"));
    let dtype_str = entry
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?;
    let dtype = DType::parse(dtype_str).ok_or_else(|| Error::UnsupportedDtype {
        name: name.clone(),
        dtype: dtype_str.to_string(),
    })?;
    let shape = entry
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape entries must be non-negative integers"))?;
    let offsets = entry
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing data_offsets"))?;
    let (start, end) = match offsets.as_slice() {
        [s, e] => (
            s.as_u64().ok_or_else(|| bad("bad data_offsets"))?,
            e.as_u64().ok_or_else(|| bad("bad data_offsets"))?,
        ),
        _ => return Err(bad("data_offsets must have two entries")),
    };
    if end < start {
        return Err(Error::BadByteRange {
            name,
            start,
            end,
            reason: "end precedes start".into(),
        });
    }
    let expected = shape.iter().product::<usize>() as u64 * dtype.byte_width() as u64;
    if end - start != expected {
        return Err(Error::BadByteRange {
            name,
            start,
            end,
            reason: format!("length {} but shape {:?} of {} needs {}", end - start, shape, dtype, expected),
        });
    }
    Ok(TensorSpec {
        name,
        dtype,
        shape,
        byte_range: (start, end),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorMap::from_bytes(&bytes)
}

pub fn save_checkpoint(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = map.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
