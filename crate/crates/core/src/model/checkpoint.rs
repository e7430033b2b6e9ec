//! Single-file tensor container.
//!
//! Layout: `"EWCK" | u64 LE manifest length | UTF-8 JSON manifest | f32 LE blob`.
//! Tensor offsets in the manifest are byte offsets into the blob.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HParams;
use crate::error::{Error, Result};
use crate::kernels::Matrix;

pub const MAGIC: &[u8; 4] = b"EWCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedTensor {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        NamedTensor::new(name, vec![m.rows(), m.cols()], m.data().to_vec())
    }

    pub fn vector(name: impl Into<String>, v: &[f32]) -> Self {
        NamedTensor::new(name, vec![v.len()], v.to_vec())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub dtype: String,
    pub endianness: String,
    pub hparams: HParams,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

/// In-memory form of a checkpoint file.
#[derive(Clone, Debug)]
pub struct Container {
    pub kind: String,
    pub hparams: HParams,
    pub tensors: Vec<NamedTensor>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn new(kind: &str, hparams: HParams) -> Self {
        Container {
            kind: kind.to_string(),
            hparams,
            tensors: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape(
                    "Container::to_bytes",
                    format!("tensor {} shape {:?} vs {} values", t.name, t.shape, t.data.len()),
                ));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += 4 * t.data.len() as u64;
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            dtype: "f32".into(),
            endianness: "little".into(),
            hparams: self.hparams.clone(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Load {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err("missing EWCK magic".into());
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let end = 12u64
            .checked_add(len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or("manifest length exceeds file size")? as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[12..end])
            .map_err(|e| format!("corrupt manifest: {e}"))?;
        if manifest.version != FORMAT_VERSION {
            return Err(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                manifest.version
            ));
        }
        if manifest.dtype != "f32" || manifest.endianness != "little" {
            return Err(format!(
                "unsupported encoding {}/{}",
                manifest.dtype, manifest.endianness
            ));
        }
        let blob = &bytes[end..];
        let blob_len = blob.len() as u64;

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            let n = t
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| format!("tensor {} shape overflows", t.name))?;
            let stop = n
                .checked_mul(4)
                .and_then(|b| b.checked_add(t.offset))
                .ok_or_else(|| format!("tensor {} extent overflows", t.name))?;
            if t.offset % 4 != 0 {
                return Err(format!("tensor {} offset {} is not 4-aligned", t.name, t.offset));
            }
            if stop > blob_len {
                return Err(format!(
                    "tensor {} spans bytes {}..{} but blob holds {blob_len} (truncated?)",
                    t.name, t.offset, stop
                ));
            }
            spans.push((t.offset, stop, &t.name));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(format!("tensors {} and {} overlap", w[0].2, w[1].2));
            }
        }
        let covered = spans.last().map_or(0, |s| s.1);
        if covered != blob_len {
            return Err(format!(
                "blob holds {blob_len} bytes but tensors cover {covered}"
            ));
        }

        let mut seen = BTreeMap::new();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for t in manifest.tensors {
            if seen.insert(t.name.clone(), ()).is_some() {
                return Err(format!("duplicate tensor name {}", t.name));
            }
            let n: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let data = blob[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name: t.name,
                shape: t.shape,
                data,
            });
        }
        Ok(Container {
            kind: manifest.kind,
            hparams: manifest.hparams,
            tensors,
            meta: manifest.meta,
        })
    }

    /// Index of tensors by name for structured extraction.
    pub fn into_store(self) -> TensorStore {
        TensorStore {
            tensors: self
                .tensors
                .into_iter()
                .map(|t| (t.name.clone(), t))
                .collect(),
        }
    }
}

/// Name-keyed tensor lookup that validates shapes on extraction.
pub struct TensorStore {
    tensors: BTreeMap<String, NamedTensor>,
}

impl TensorStore {
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>, String> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| format!("missing tensor {name}"))?;
        if t.shape != shape {
            return Err(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape
            ));
        }
        Ok(t.data)
    }

    pub fn take_matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix, String> {
        let data = self.take(name, &[rows, cols])?;
        Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())
    }

    /// Matrix with a known row count and whatever column count was stored.
    pub fn take_matrix_any_cols(&mut self, name: &str, rows: usize) -> Result<Matrix, String> {
        let cols = match self.tensors.get(name) {
            Some(t) if t.shape.len() == 2 => t.shape[1],
            Some(t) => return Err(format!("tensor {name} has rank {}", t.shape.len())),
            None => return Err(format!("missing tensor {name}")),
        };
        self.take_matrix(name, rows, cols)
    }

    pub fn finish(self) -> Result<(), String> {
        match self.tensors.keys().next() {
            Some(extra) => Err(format!("unexpected tensor {extra}")),
            None => Ok(()),
        }
    }
}
