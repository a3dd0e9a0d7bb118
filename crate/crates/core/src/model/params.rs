use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::block::BlockId;
use crate::tensor::{Real, Tensor};

/// Named tensors (trainable weights and batch-norm buffers) in a stable order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

/// Location of one tensor inside a serialized parameter blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Names owned by block `id` (weights, heads, gates and buffers).
    pub fn block_names(&self, id: BlockId) -> Vec<String> {
        let prefix = format!("{}.", id.prefix());
        self.tensors.keys().filter(|n| n.starts_with(&prefix)).cloned().collect()
    }

    pub fn blocks(&self) -> Vec<BlockId> {
        let mut ids: Vec<BlockId> = self.tensors.keys().filter_map(|n| BlockId::parse_prefix(n)).collect();
        ids.dedup();
        ids
    }

    /// Little-endian bytes of every tensor of block `id`, in name order.
    pub fn block_bytes(&self, id: BlockId) -> Vec<u8> {
        let mut out = Vec::new();
        for name in self.block_names(id) {
            for &v in self.tensors[&name].data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Serializes into a flat blob plus an index of entries.
    pub fn to_blob(&self) -> (Vec<u8>, Vec<TensorEntry>) {
        let mut blob = Vec::with_capacity(self.element_count() * F::BYTES);
        let mut index = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blob.len();
            for &v in t.data() {
                v.write_le(&mut blob);
            }
            index.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                bytes: blob.len() - offset,
            });
        }
        (blob, index)
    }

    pub fn from_blob(blob: &[u8], index: &[TensorEntry]) -> Result<Self> {
        let mut store = Self::new();
        for e in index {
            let n: usize = e.shape.iter().product();
            if e.bytes != n * F::BYTES || e.offset + e.bytes > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "entry {} ({} bytes at {}) does not fit blob of {} bytes",
                    e.name,
                    e.bytes,
                    e.offset,
                    blob.len()
                )));
            }
            let data = blob[e.offset..e.offset + e.bytes].chunks_exact(F::BYTES).map(F::read_le).collect();
            store.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
        }
        Ok(store)
    }
}
