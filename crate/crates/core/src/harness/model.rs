//! Encoder checkpoint and class prototypes on disk.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objective::{ClassPrototypes, DEFAULT_TEMPERATURE};
use crate::tensor::Tensor;
use crate::vit::{EncoderCheckpoint, EncoderConfig};

use super::container::{self, NamedTensor, TensorData};
use super::keyed_rng;

pub const ENCODER_FORMAT: &str = "ttl-encoder";
pub const PROTOTYPE_FORMAT: &str = "ttl-prototypes";
pub const ENCODER_FILE: &str = "encoder";
pub const PROTOTYPE_FILE: &str = "prototypes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PrototypeMeta {
    class_names: Vec<String>,
    temperature: f64,
}

/// A frozen encoder with the prototypes it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub checkpoint: EncoderCheckpoint,
    pub prototypes: ClassPrototypes,
    pub temperature: f64,
}

impl Model {
    pub fn new(checkpoint: EncoderCheckpoint, prototypes: ClassPrototypes) -> Result<Self> {
        if prototypes.dim() != checkpoint.config.out_dim {
            return Err(Error::shape(
                "model",
                format!(
                    "prototypes have dimension {}, encoder emits {}",
                    prototypes.dim(),
                    checkpoint.config.out_dim
                ),
            ));
        }
        Ok(Model {
            checkpoint,
            prototypes,
            temperature: DEFAULT_TEMPERATURE,
        })
    }

    /// SHA-256 over the encoder checksum, prototype values and class names.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.checkpoint.checksum().as_bytes());
        for v in self.prototypes.matrix().data() {
            h.update(v.to_le_bytes());
        }
        for n in self.prototypes.names() {
            h.update(n.as_bytes());
            h.update([0]);
        }
        h.update(self.temperature.to_le_bytes());
        hex::encode(h.finalize())
    }

    /// Write `dir/encoder.{json,bin}` and `dir/prototypes.{json,bin}`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let tensors: Vec<NamedTensor> = self
            .checkpoint
            .named_tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor::new(name, t.shape().to_vec(), TensorData::F64(t.data().to_vec())))
            .collect();
        let meta = EncoderMeta {
            config: self.checkpoint.config.clone(),
        };
        container::write(&dir.join(ENCODER_FILE), ENCODER_FORMAT, &tensors, to_json(&meta)?)?;
        let p = self.prototypes.matrix();
        let protos = [NamedTensor::new(
            "prototypes",
            p.shape().to_vec(),
            TensorData::F64(p.data().to_vec()),
        )];
        let meta = PrototypeMeta {
            class_names: self.prototypes.names().to_vec(),
            temperature: self.temperature,
        };
        container::write(&dir.join(PROTOTYPE_FILE), PROTOTYPE_FORMAT, &protos, to_json(&meta)?)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let base = dir.join(ENCODER_FILE);
        let c = container::read(&base, ENCODER_FORMAT)?;
        let path = container::manifest_path(&base);
        let meta: EncoderMeta = serde_json::from_value(c.manifest.metadata.clone()).map_err(|e| format_err(&path, e))?;
        let mut map = BTreeMap::new();
        for (name, t) in c.tensors {
            let TensorData::F64(data) = t.data else {
                return Err(format_err(&path, format!("tensor '{name}' is not f64")));
            };
            map.insert(name, Tensor::from_vec(t.shape, data)?);
        }
        let checkpoint = EncoderCheckpoint::from_named(meta.config, map).map_err(|e| format_err(&path, e))?;

        let base = dir.join(PROTOTYPE_FILE);
        let c = container::read(&base, PROTOTYPE_FORMAT)?;
        let path = container::manifest_path(&base);
        let meta: PrototypeMeta = serde_json::from_value(c.manifest.metadata.clone()).map_err(|e| format_err(&path, e))?;
        let t = c.get("prototypes", &path)?;
        let TensorData::F64(data) = &t.data else {
            return Err(format_err(&path, "prototypes are not f64"));
        };
        let matrix = Tensor::from_vec(t.shape.clone(), data.clone())?;
        let prototypes = ClassPrototypes::new(matrix, meta.class_names).map_err(|e| format_err(&path, e))?;
        let mut model = Model::new(checkpoint, prototypes).map_err(|e| format_err(&path, e))?;
        model.temperature = meta.temperature;
        Ok(model)
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::config(e.to_string()))
}

fn format_err(path: &Path, e: impl ToString) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// `C` orthonormal rows in `dim` dimensions: gaussian draws followed by
/// modified Gram-Schmidt.
pub fn random_orthonormal_prototypes(names: Vec<String>, dim: usize, seed: u64) -> Result<ClassPrototypes> {
    let c = names.len();
    if c == 0 || c > dim {
        return Err(Error::config(format!("cannot place {c} orthonormal prototypes in {dim} dimensions")));
    }
    let mut rng = keyed_rng(b"ttlproto", seed, 0, 0);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    while rows.len() < c {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    ClassPrototypes::from_rows(rows, names)
}
