//! `.ptc` named-tensor container.
//!
//! Layout:
//!
//! ```text
//! b"POSETC01" | u64 LE manifest length | manifest JSON | blob
//! ```
//!
//! The manifest lists every tensor with its dtype, shape, byte offset and
//! length inside the blob, plus free-form JSON metadata. Tensors are
//! little-endian and row-major, stored in name order at 8-byte aligned
//! offsets, so equal contents always serialize to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"POSETC01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    endianness: String,
    layout: String,
    tensors: BTreeMap<String, Entry>,
    metadata: Map<String, Value>,
}

/// A tensor kept as raw little-endian bytes, so entries that are only
/// passed through are preserved bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_f64(t: &Tensor) -> Self {
        let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { dtype: DType::F64, shape: t.shape().to_vec(), bytes }
    }

    pub fn from_f32(t: &Tensor) -> Self {
        let bytes = t.data().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        Self { dtype: DType::F32, shape: t.shape().to_vec(), bytes }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = match self.dtype {
            DType::F64 => self.bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::F32 => self.bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        };
        Tensor::from_vec(self.shape.clone(), data).expect("validated on construction")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    tensors: BTreeMap<String, StoredTensor>,
    metadata: Map<String, Value>,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(name.into(), StoredTensor::from_f64(t));
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(name.into(), StoredTensor::from_f32(t));
    }

    pub fn insert_stored(&mut self, name: impl Into<String>, t: StoredTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn stored(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .get(name)
            .map(StoredTensor::to_tensor)
            .ok_or_else(|| Error::Load(format!("missing tensor {name}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<StoredTensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Names under `prefix`, with the prefix stripped.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.tensors.keys().filter_map(move |k| k.strip_prefix(prefix))
    }

    pub fn metadata(&self) -> &Map<String, Value> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut Map<String, Value> {
        &mut self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: Value) {
        self.metadata.insert(key.into(), value);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                Entry { dtype: t.dtype, shape: t.shape.clone(), offset, nbytes: t.bytes.len() },
            );
            offset = align8(offset + t.bytes.len());
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            endianness: "little".into(),
            layout: "row-major".into(),
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
            out.resize(out.len() + align8(t.bytes.len()) - t.bytes.len(), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Load("not a .ptc container (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json_end = 16usize
            .checked_add(len)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| Error::Load("manifest length exceeds file size".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..json_end]).map_err(|e| Error::Load(format!("bad manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Load(format!("unsupported container version {}", manifest.format_version)));
        }
        if manifest.endianness != "little" || manifest.layout != "row-major" {
            return Err(Error::Load(format!(
                "unsupported layout {}/{}",
                manifest.endianness, manifest.layout
            )));
        }
        let blob = &bytes[json_end..];
        let mut tensors = BTreeMap::new();
        for (name, e) in manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if numel * e.dtype.size() != e.nbytes {
                return Err(Error::Load(format!(
                    "tensor {name}: shape {:?} needs {} bytes, manifest says {}",
                    e.shape,
                    numel * e.dtype.size(),
                    e.nbytes
                )));
            }
            let end = e.offset.checked_add(e.nbytes).filter(|end| *end <= blob.len()).ok_or_else(|| {
                Error::Load(format!("tensor {name}: byte range {}+{} outside blob", e.offset, e.nbytes))
            })?;
            tensors.insert(
                name,
                StoredTensor { dtype: e.dtype, shape: e.shape, bytes: blob[e.offset..end].to_vec() },
            );
        }
        Ok(Self { tensors, metadata: manifest.metadata })
    }

    /// Writes through a temporary sibling file and an atomic rename.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Load(msg) => Error::Load(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
