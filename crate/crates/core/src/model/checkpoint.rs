//! `GTBV` checkpoint files.
//!
//! Layout: magic `b"GTBV"`, `u32` format version, `u32` header length, a JSON
//! header (tensor names and shapes in storage order, config echo, seed),
//! then every tensor as little-endian `f32` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ParamStore;
use crate::tensor::Tensor;
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"GTBV";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint has no tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?}: checkpoint shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tensors: Vec<TensorEntry>,
    pub config: serde_json::Value,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    /// Collects stores under name prefixes (`""` for none).
    pub fn from_stores<T: Scalar>(
        config: serde_json::Value,
        seed: u64,
        stores: &[(&str, &ParamStore<T>)],
    ) -> Self {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        for (prefix, store) in stores {
            for (name, t) in store.names().iter().zip(store.tensors()) {
                entries.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                });
                tensors.push(t.cast::<f32>());
            }
        }
        Self {
            header: CheckpointHeader {
                tensors: entries,
                config,
                seed,
            },
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Overwrites every tensor of `store` with the checkpoint's `prefix`ed
    /// tensor of the same name; all-or-nothing.
    pub fn restore<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        prefix: &str,
    ) -> Result<(), CheckpointError> {
        let mut loaded = Vec::with_capacity(store.len());
        for (name, t) in store.names().iter().zip(store.tensors()) {
            let full = format!("{prefix}{name}");
            let src = self
                .get(&full)
                .ok_or_else(|| CheckpointError::Missing(full.clone()))?;
            if src.shape() != t.shape() {
                return Err(CheckpointError::Shape {
                    name: full,
                    expected: t.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            loaded.push(src.cast::<T>());
        }
        for (dst, src) in store.tensors_mut().iter_mut().zip(loaded) {
            *dst = src;
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let header =
            serde_json::to_vec(&self.header).map_err(|e| CheckpointError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::new();
        for t in &self.tensors {
            buf.clear();
            buf.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        if &word != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {version}"
            )));
        }
        r.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; 4 * n];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| CheckpointError::Format(format!("{}: {err}", e.name)))?;
            tensors.push(t);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes",
                rest.len()
            )));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
