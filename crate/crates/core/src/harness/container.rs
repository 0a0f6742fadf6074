//! Manifest + blob container: `{base}.json` describes named tensors stored
//! back to back, little-endian, in `{base}.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U8,
    U32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U8 => 1,
            Dtype::U32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F64(_) => Dtype::F64,
            TensorData::U8(_) => Dtype::U8,
            TensorData::U32(_) => Dtype::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
            Dtype::U8 => TensorData::U8(bytes.to_vec()),
            Dtype::U32 => TensorData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Self {
        NamedTensor {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, NamedTensor>,
}

impl Container {
    pub fn get(&self, name: &str, path: &Path) -> Result<&NamedTensor> {
        self.tensors.get(name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: format!("missing tensor '{name}'"),
        })
    }
}

pub fn manifest_path(base: &Path) -> PathBuf {
    with_suffix(base, "json")
}

pub fn blob_path(base: &Path) -> PathBuf {
    with_suffix(base, "bin")
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Serialize tensors into manifest text and blob bytes.
pub fn encode(format: &str, blob_name: &str, tensors: &[NamedTensor], metadata: serde_json::Value) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::shape(
                "container_encode",
                format!("tensor '{}' has shape {:?} but {} values", t.name, t.shape, t.data.len()),
            ));
        }
        let offset = blob.len();
        t.data.write_le(&mut blob);
        entries.push(TensorEntry {
            name: t.name.clone(),
            dtype: t.data.dtype(),
            shape: t.shape.clone(),
            offset,
            length: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format: format.to_string(),
        version: CONTAINER_VERSION,
        blob: blob_name.to_string(),
        tensors: entries,
        metadata,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::config(e.to_string()))?;
    text.push('\n');
    Ok((text, blob))
}

/// Write `{base}.json` and `{base}.bin`.
pub fn write(base: &Path, format: &str, tensors: &[NamedTensor], metadata: serde_json::Value) -> Result<()> {
    let blob_file = blob_path(base);
    let blob_name = blob_file
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::config(format!("bad output path {}", base.display())))?;
    let (text, blob) = encode(format, &blob_name, tensors, metadata)?;
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&blob_file, blob).map_err(io_err(&blob_file))?;
    let mpath = manifest_path(base);
    fs::write(&mpath, text).map_err(io_err(&mpath))?;
    Ok(())
}

/// Read and validate a container; `expected_format` must match the manifest.
pub fn read(base: &Path, expected_format: &str) -> Result<Container> {
    let mpath = manifest_path(base);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| format_err(&mpath, e.to_string()))?;
    if manifest.format != expected_format {
        return Err(format_err(
            &mpath,
            format!("expected format '{expected_format}', found '{}'", manifest.format),
        ));
    }
    if manifest.version != CONTAINER_VERSION {
        return Err(format_err(&mpath, format!("unsupported version {}", manifest.version)));
    }
    let bpath = mpath.with_file_name(&manifest.blob);
    let blob = fs::read(&bpath).map_err(io_err(&bpath))?;
    let mut tensors = BTreeMap::new();
    let mut covered = 0usize;
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        if e.length != count * e.dtype.size() {
            return Err(format_err(&mpath, format!("tensor '{}': length disagrees with shape", e.name)));
        }
        let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len());
        let Some(end) = end else {
            return Err(format_err(&bpath, format!("tensor '{}' extends past the blob", e.name)));
        };
        covered += e.length;
        let data = TensorData::read_le(e.dtype, &blob[e.offset..end]);
        let t = NamedTensor::new(e.name.clone(), e.shape.clone(), data);
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(format_err(&mpath, format!("duplicate tensor '{}'", e.name)));
        }
    }
    if covered != blob.len() {
        return Err(format_err(&bpath, "blob size does not match the manifest"));
    }
    Ok(Container { manifest, tensors })
}
