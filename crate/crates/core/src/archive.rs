//! Tensor container file.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes   "VIGRUARC"
//! length   u64 LE    byte length of the manifest
//! manifest JSON      {"version":1,"metadata":{..},"tensors":[{name,shape,dtype,offset,nbytes}..]}
//! blobs    raw       little-endian IEEE-754 values; offsets are relative to
//!                    the first byte after the manifest
//! ```
//!
//! Parsing is strict: every entry must lie inside the blob region, match its
//! declared shape and dtype exactly, and carry a unique name.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 8] = *b"VIGRUARC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    #[serde(default)]
    metadata: Map<String, Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub metadata: Map<String, Value>,
    entries: Vec<TensorEntry>,
    index: HashMap<String, usize>,
    blob: Vec<u8>,
}

fn dtype_width(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Appends a tensor in its own precision.
    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        let offset = self.blob.len() as u64;
        self.blob.reserve(tensor.numel() * T::BYTES);
        for &v in tensor.data() {
            v.write_le(&mut self.blob);
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(TensorEntry {
            name,
            shape: tensor.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            nbytes: self.blob.len() as u64 - offset,
        });
        Ok(())
    }

    /// Decodes a tensor, converting from the stored precision to `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let entry = self
            .entry(name)
            .ok_or_else(|| Error::Load(format!("archive has no tensor {name}")))?;
        let bytes = &self.blob[entry.offset as usize..(entry.offset + entry.nbytes) as usize];
        // Same-precision reads are bit-exact; otherwise convert through f64.
        let data: Vec<T> = if entry.dtype == T::DTYPE {
            bytes.chunks_exact(T::BYTES).map(T::read_le).collect()
        } else if entry.dtype == "f32" {
            bytes.chunks_exact(4).map(|c| T::of(f64::from(f32::read_le(c)))).collect()
        } else {
            bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect()
        };
        Tensor::new(&entry.shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            tensors: self.entries.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + self.blob.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: String| Error::Format(msg);
        if bytes.len() < HEADER_LEN {
            return Err(fail(format!("truncated header: {} bytes", bytes.len())));
        }
        if bytes[..8] != MAGIC {
            return Err(fail("bad magic".into()));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[HEADER_LEN..];
        if manifest_len > rest.len() as u64 {
            return Err(fail(format!(
                "manifest length {manifest_len} exceeds the {} remaining bytes",
                rest.len()
            )));
        }
        let (json, blob) = rest.split_at(manifest_len as usize);
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| fail(format!("manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(fail(format!("unsupported version {}", manifest.version)));
        }

        let mut index = HashMap::with_capacity(manifest.tensors.len());
        let mut end = 0u64;
        for (i, e) in manifest.tensors.iter().enumerate() {
            let width = dtype_width(&e.dtype)
                .ok_or_else(|| fail(format!("{}: unknown dtype {:?}", e.name, e.dtype)))?;
            if e.shape.is_empty() || e.shape.contains(&0) {
                return Err(fail(format!("{}: invalid shape {:?}", e.name, e.shape)));
            }
            let expected = e
                .shape
                .iter()
                .try_fold(width as u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| fail(format!("{}: shape {:?} overflows", e.name, e.shape)))?;
            if expected != e.nbytes {
                return Err(fail(format!(
                    "{}: shape {:?} needs {expected} bytes, entry declares {}",
                    e.name, e.shape, e.nbytes
                )));
            }
            let stop = e
                .offset
                .checked_add(e.nbytes)
                .filter(|&s| s <= blob.len() as u64)
                .ok_or_else(|| {
                    fail(format!(
                        "{}: bytes {}..+{} lie outside the {}-byte blob region (truncated?)",
                        e.name,
                        e.offset,
                        e.nbytes,
                        blob.len()
                    ))
                })?;
            end = end.max(stop);
            if index.insert(e.name.clone(), i).is_some() {
                return Err(fail(format!("duplicate tensor {}", e.name)));
            }
        }
        if end != blob.len() as u64 {
            return Err(fail(format!(
                "{} trailing bytes after the last tensor",
                blob.len() as u64 - end
            )));
        }
        Ok(Self {
            metadata: manifest.metadata,
            entries: manifest.tensors,
            index,
            blob: blob.to_vec(),
        })
    }

    /// Writes through a temporary sibling and renames, so readers never see
    /// a partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
