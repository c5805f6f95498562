use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DType, Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    /// The tape variable bound to this parameter by [`ParamStore::bind`].
    pub fn var(self, vars: &[Var]) -> Var {
        vars[self.0]
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

/// Named model tensors: trainable parameters and non-trainable buffers
/// (e.g. running normalization statistics), in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    fn push(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name, tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor, false)
    }

    /// Adds a parameter drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let t = Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-bound..=bound)));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// Records every entry as a tape leaf; trainable entries take gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.tensor.clone(), e.trainable))
            .collect()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), tensor: e.tensor.cast(), trainable: e.trainable })
                .collect(),
        }
    }

    /// Overwrites values from `other` by name; shapes must match.
    pub fn load_values<U: Float>(&mut self, other: &ParamStore<U>) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing {}", e.name)))?;
            if src.tensor.shape() != e.tensor.shape() {
                return Err(Error::Data(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    e.name,
                    src.tensor.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor = src.tensor.cast();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    blob: String,
    byte_order: String,
    entries: Vec<ManifestEntry>,
}

/// Checkpoint files: one flat little-endian blob plus a JSON manifest.
pub struct Checkpoint;

impl Checkpoint {
    pub const BLOB: &'static str = "params.bin";
    pub const MANIFEST: &'static str = "params.json";

    pub fn save<T: Float>(store: &ParamStore<T>, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(store.len());
        for e in &store.entries {
            entries.push(ManifestEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                dtype: T::DTYPE,
                offset: blob.len(),
                trainable: e.trainable,
            });
            for &v in e.tensor.data() {
                v.write_le(&mut blob);
            }
        }
        let manifest = Manifest { blob: Self::BLOB.into(), byte_order: "little".into(), entries };
        let blob_path = dir.join(Self::BLOB);
        fs::write(&blob_path, &blob).map_err(|e| Error::io(blob_path, e))?;
        let man_path = dir.join(Self::MANIFEST);
        fs::write(&man_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(man_path, e))?;
        Ok(())
    }

    /// Loads a checkpoint into a store of element type `T`, converting
    /// from the stored dtype when needed.
    pub fn load<T: Float>(dir: &Path) -> Result<ParamStore<T>> {
        let man_path = dir.join(Self::MANIFEST);
        let text = fs::read(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        let blob_path = dir.join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut store = ParamStore::new();
        for m in manifest.entries {
            let count: usize = m.shape.iter().product();
            let width = m.dtype.size_of();
            let end = m.offset + count * width;
            if end > blob.len() {
                return Err(Error::Data(format!("{}: blob too short", m.name)));
            }
            let bytes = &blob[m.offset..end];
            let data: Vec<T> = match m.dtype {
                DType::F32 => bytes.chunks_exact(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
                DType::F64 => bytes.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
            };
            let t = Tensor::new(m.shape, data)?;
            store.push(m.name, t, m.trainable);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::from_f64([2, 3], &[1.0, -2.5, 3.25, 1e-7, 0.0, -0.0]).unwrap());
        store.add_buffer("running_mean", Tensor::from_f64([2], &[0.1, 0.2]).unwrap());
        Checkpoint::save(&store, dir.path()).unwrap();
        let back: ParamStore<f32> = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        let w = back.find("w").unwrap();
        assert_eq!(back.get(w).shape(), &[2, 3]);
        let bits: Vec<u32> = back.get(w).data().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u32> = store.get(w).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
        assert!(!back.is_trainable(back.find("running_mean").unwrap()));

        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(Checkpoint::MANIFEST)).unwrap()).unwrap();
        assert_eq!(manifest["entries"][1]["offset"], 24);
        assert_eq!(manifest["entries"][0]["dtype"], "f32");
    }
}
