//! Named parameter storage shared by the decoder, encoders, projectors,
//! and adapters. Names are dot-paths with a leading group prefix
//! (`decoder.`, `audio_encoder.`, `audio_projector.`, `vision_encoder.`,
//! `vision_projector.`, `lora_a.`, `lora_v.`); freeze masks and
//! fingerprints select by that prefix.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{io, Graph, NodeId, Tensor};
use crate::rng::fnv1a64;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Names in sorted order, optionally restricted to a prefix.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.map
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn element_count_with_prefix(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Absorb all entries of `other`; duplicate names are an error.
    pub fn merge_from(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.map {
            if self.map.contains_key(&k) {
                return Err(Error::Config(format!("duplicate parameter '{k}'")));
            }
            self.map.insert(k, v);
        }
        Ok(())
    }

    /// 64-bit fingerprint of every parameter whose name starts with
    /// `prefix`: names, shapes, and exact data bytes, in sorted name order.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in self.map.iter().filter(|(k, _)| k.starts_with(prefix)) {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            for &e in t.shape() {
                bytes.extend_from_slice(&(e as u64).to_le_bytes());
            }
            bytes.extend_from_slice(&t.le_bytes());
        }
        fnv1a64(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, &Tensor)> =
            self.map.iter().map(|(k, v)| (k.clone(), v)).collect();
        io::save_tensors(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = Self::new();
        for (name, t) in io::load_tensors(path)? {
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// Binds store parameters into a graph as leaves, once per name, and
/// remembers the mapping so gradients can be read back by name after
/// `backward`. `trainable` decides which leaves carry `requires_grad`.
pub struct GraphBinder<'a> {
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    ids: BTreeMap<String, NodeId>,
}

impl<'a> GraphBinder<'a> {
    pub fn new(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self {
            store,
            trainable: Box::new(trainable),
            ids: BTreeMap::new(),
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, |_| false)
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(id) = self.ids.get(name) {
            return Ok(*id);
        }
        let mut t = self.store.get(name)?.clone();
        t.requires_grad = (self.trainable)(name);
        let id = g.leaf(t);
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }
}
