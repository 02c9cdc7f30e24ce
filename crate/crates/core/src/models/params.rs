use std::cell::RefCell;
use std::collections::BTreeMap;

use aikd_autograd::{grad, Array, Tensor};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Trainable,
    /// Normalization running statistics; updated by forward passes only.
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    kind: ParamKind,
    value: Array,
}

/// Flat, serializable form of one named array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: &Array) -> Self {
        NamedArray {
            name: name.into(),
            kind,
            shape: value.shape().to_vec(),
            data: value.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array> {
        Array::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| Error::ShapeMismatch(format!("{}: {e}", self.name)))
    }
}

/// Ordered collection of named parameters and buffers of one network.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Array) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(Entry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of scalar entries in trainable tensors.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.len()).sum()
    }

    /// Hash over names, shapes and the exact bits of every value.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for e in &self.entries {
            bytes.extend_from_slice(e.name.as_bytes());
            bytes.push(0);
            for d in e.value.shape() {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in e.value.iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    pub fn to_named(&self) -> Vec<NamedArray> {
        self.entries.iter().map(|e| NamedArray::new(&e.name, e.kind, &e.value)).collect()
    }

    /// Replaces every value from `named`, which must list exactly this store's
    /// parameters with matching shapes.
    pub fn load_named(&mut self, named: &[NamedArray]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::SpecMismatch(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                named.len()
            )));
        }
        let by_name: BTreeMap<&str, &NamedArray> = named.iter().map(|n| (n.name.as_str(), n)).collect();
        let mut values = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let n = by_name
                .get(e.name.as_str())
                .ok_or_else(|| Error::SpecMismatch(format!("missing parameter {}", e.name)))?;
            if n.shape != e.value.shape() {
                return Err(Error::SpecMismatch(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    n.shape,
                    e.value.shape()
                )));
            }
            values.push(n.to_array()?);
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value = v;
        }
        Ok(())
    }

    /// Copies all values from a store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len()
            || self.entries.iter().zip(&other.entries).any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::SpecMismatch("parameter layouts differ".into()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.assign(&b.value);
        }
        Ok(())
    }

    /// Largest absolute elementwise difference to a store with the same layout.
    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|(a, b)| a.value.iter().zip(b.value.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Array)>) {
        for (id, v) in updates {
            debug_assert_eq!(self.kind(id), ParamKind::Buffer);
            self.entries[id.0].value = v;
        }
    }
}

/// How normalization layers compute their statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running estimates are updated.
    Train,
    /// Running estimates.
    Eval,
}

/// One recorded forward pass over a [`ParamStore`].
///
/// Trainable parameters become gradient leaves when `track` is set and
/// constants otherwise. Running-statistic updates are collected rather than
/// applied, so the caller decides whether a pass may change buffers.
pub struct Forward<'a> {
    store: &'a ParamStore,
    track: bool,
    leaves: RefCell<BTreeMap<ParamId, Tensor>>,
    updates: RefCell<Vec<(ParamId, Array)>>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, track: bool) -> Self {
        Forward { store, track, leaves: RefCell::new(BTreeMap::new()), updates: RefCell::new(Vec::new()) }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        if self.track && self.store.kind(id) == ParamKind::Trainable {
            self.leaves
                .borrow_mut()
                .entry(id)
                .or_insert_with(|| Tensor::leaf(self.store.value(id).clone()))
                .clone()
        } else {
            Tensor::constant(self.store.value(id).clone())
        }
    }

    pub(crate) fn record_update(&self, id: ParamId, value: Array) {
        self.updates.borrow_mut().push((id, value));
    }

    pub fn take_updates(&self) -> Vec<(ParamId, Array)> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }

    /// Gradients of `loss` for every parameter touched by this pass.
    pub fn gradients(&self, loss: &Tensor) -> Result<Vec<(ParamId, Array)>> {
        let leaves = self.leaves.borrow();
        let ids: Vec<ParamId> = leaves.keys().copied().collect();
        let refs: Vec<&Tensor> = leaves.values().collect();
        let grads = grad(loss, &refs, false)?;
        Ok(ids.into_iter().zip(grads.into_iter().map(|g| g.value().clone())).collect())
    }
}
