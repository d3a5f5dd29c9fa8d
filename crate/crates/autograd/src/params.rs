use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors. Names are dotted paths (`encoder.conv0.weight`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    decay: Vec<bool>,
    index: HashMap<String, ParamId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    dtype: String,
    byte_order: String,
    data_file: String,
    params: Vec<CheckpointEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` marks it for AdamW weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    /// Returns the number of tensors copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize, Error> {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = other.id(name).ok_or_else(|| Error::Checkpoint(format!("source has no parameter {name}")))?;
            let src = other.get(src);
            if src.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Writes `<dir>/params.json` and `<dir>/params.f32` (little-endian f32,
    /// parameters concatenated in registration order).
    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        let mut blob = Vec::with_capacity(self.num_scalars() * 4);
        let mut offset = 0;
        for (name, value) in self.names.iter().zip(&self.values) {
            entries.push(CheckpointEntry { name: name.clone(), shape: value.shape().to_vec(), offset });
            for &x in value.data() {
                blob.extend_from_slice(&(x as f32).to_le_bytes());
            }
            offset += value.numel();
        }
        let manifest = CheckpointManifest {
            dtype: "f32le".into(),
            byte_order: "little".into(),
            data_file: "params.f32".into(),
            params: entries,
        };
        fs::File::create(dir.join("params.f32"))?.write_all(&blob)?;
        fs::write(
            dir.join("params.json"),
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?,
        )?;
        Ok(())
    }

    /// Loads values for every parameter name present in both the checkpoint
    /// and this store whose name starts with `prefix`. Returns the count.
    pub fn load(&mut self, dir: &Path, prefix: &str) -> Result<usize, Error> {
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("params.json"))?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if manifest.dtype != "f32le" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
        }
        let bytes = fs::read(dir.join(&manifest.data_file))?;
        let mut loaded = 0;
        for e in &manifest.params {
            if !e.name.starts_with(prefix) {
                continue;
            }
            let Some(id) = self.id(&e.name) else { continue };
            if self.values[id.0].shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: checkpoint {:?}, model {:?}",
                    e.name,
                    e.shape,
                    self.values[id.0].shape()
                )));
            }
            let n = self.values[id.0].numel();
            let start = e.offset * 4;
            let end = start + n * 4;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("blob truncated at {}", e.name)));
            }
            for (dst, chunk) in self.values[id.0].data_mut().iter_mut().zip(bytes[start..end].chunks_exact(4)) {
                *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            }
            loaded += 1;
        }
        Ok(loaded)
    }
}
