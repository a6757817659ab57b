//! Single-file checkpoints: an 8-byte magic, a `u64` manifest length, the JSON
//! manifest, then every parameter array as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::grid::CLASS_NAMES;
use crate::model::{ModelConfig, STUDENT_PREFIX, TEACHER_PREFIX};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LIECKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub class_names: Vec<String>,
    pub model: ModelConfig,
    /// Free-form training settings and provenance.
    #[serde(default)]
    pub train: serde_json::Value,
    pub epoch: usize,
    pub val_miou: Option<f64>,
    pub arrays: Vec<ArrayInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(
        store: &ParamStore<T>,
        model: &ModelConfig,
        train: serde_json::Value,
        epoch: usize,
        val_miou: Option<f64>,
    ) -> Self {
        let mut arrays = Vec::with_capacity(store.len());
        let mut data = Vec::with_capacity(store.len());
        for e in store.entries() {
            arrays.push(ArrayInfo {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            });
            data.push(e.value.data().iter().map(|v| v.f64() as f32).collect());
        }
        let manifest = Manifest {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            model: model.clone(),
            train,
            epoch,
            val_miou,
            arrays,
        };
        Self { manifest, data }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let floats: usize = self.data.iter().map(|d| d.len()).sum();
        let mut buf = Vec::with_capacity(16 + manifest.len() + floats * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        buf.extend_from_slice(&manifest);
        for d in &self.data {
            for v in d {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let mut off = 16 + len;
        let mut data = Vec::with_capacity(manifest.arrays.len());
        for a in &manifest.arrays {
            let n: usize = a.shape.iter().product();
            let chunk = bytes
                .get(off..off + n * 4)
                .ok_or_else(|| bad(&format!("truncated array {}", a.name)))?;
            data.push(
                chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
            off += n * 4;
        }
        if off != bytes.len() {
            return Err(bad(&format!("{} trailing bytes", bytes.len() - off)));
        }
        Ok(Self { manifest, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.encode()?).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn has_teacher(&self) -> bool {
        self.manifest.arrays.iter().any(|a| is_teacher(&a.name))
    }

    /// Drops every teacher-namespaced array.
    pub fn strip_teacher(&self) -> Self {
        let (arrays, data) = self
            .manifest
            .arrays
            .iter()
            .zip(&self.data)
            .filter(|(a, _)| !is_teacher(&a.name))
            .map(|(a, d)| (a.clone(), d.clone()))
            .unzip();
        Self {
            manifest: Manifest {
                arrays,
                ..self.manifest.clone()
            },
            data,
        }
    }

    /// Copies checkpoint values into every parameter of `store`; extra
    /// checkpoint arrays are ignored.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let k = self
                .manifest
                .arrays
                .iter()
                .position(|a| a.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            let shape = &self.manifest.arrays[k].shape;
            if shape.as_slice() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "array {name} has shape {shape:?}, model expects {:?}",
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = Tensor::from_vec(
                shape,
                self.data[k].iter().map(|&v| T::of(v as f64)).collect(),
            );
        }
        Ok(())
    }
}

pub fn is_teacher(name: &str) -> bool {
    name.strip_prefix(TEACHER_PREFIX)
        .is_some_and(|r| r.starts_with('.'))
}

pub fn is_student(name: &str) -> bool {
    name.strip_prefix(STUDENT_PREFIX)
        .is_some_and(|r| r.starts_with('.'))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LieModel, Variant};

    #[test]
    fn round_trip_and_strip() {
        let cfg = ModelConfig {
            variant: Variant::Full,
            ..ModelConfig::desk()
        };
        let mut store = ParamStore::<f32>::new();
        LieModel::new(&mut store, &cfg, 3).unwrap();
        let ck = Checkpoint::from_store(&store, &cfg, serde_json::json!({"seed": 3}), 2, Some(0.5));
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert!(ck.has_teacher());
        let s = ck.strip_teacher();
        assert!(!s.has_teacher());
        assert!(s.manifest.arrays.iter().all(|a| is_student(&a.name)));

        let mut fresh = ParamStore::<f32>::new();
        LieModel::new(
            &mut fresh,
            &ModelConfig {
                variant: Variant::Baseline,
                ..cfg.clone()
            },
            99,
        )
        .unwrap();
        s.load_into(&mut fresh).unwrap();
        for e in fresh.entries() {
            assert_eq!(e.value, *store.value(store.get(&e.name).unwrap()));
        }
        let mut full = ParamStore::<f32>::new();
        LieModel::new(&mut full, &cfg, 1).unwrap();
        assert!(matches!(s.load_into(&mut full), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        assert!(Checkpoint::decode(b"nope").is_err());
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::<f32>::new();
        LieModel::new(
            &mut store,
            &ModelConfig {
                variant: Variant::Baseline,
                ..cfg.clone()
            },
            1,
        )
        .unwrap();
        let bytes = Checkpoint::from_store(&store, &cfg, serde_json::Value::Null, 0, None)
            .encode()
            .unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(!is_teacher("teachers.x") && is_teacher("teacher.x"));
    }
}
