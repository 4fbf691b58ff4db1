//! Named parameter storage shared by the networks, the optimiser and the
//! checkpoint format.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimiser.
    Trainable,
    /// Participates in the forward pass, never receives updates.
    Frozen,
    /// Non-differentiable state (running statistics, fixed projections).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    name: String,
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), entries: Vec::new() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, kind, tensor });
        ParamId(self.entries.len() - 1)
    }

    /// Fan-in scaled normal initialisation: N(0, 2 / fan_in).
    pub fn add_he_normal<R: Rng>(&mut self, name: impl Into<String>, shape: Shape, fan_in: usize, rng: &mut R) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.numel()).map(|_| S::lit(normal.sample(rng))).collect();
        self.add(name, ParamKind::Trainable, Tensor::from_vec(shape, data).expect("shape"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, kind: ParamKind, len: usize, value: f64) -> ParamId {
        self.add(name, kind, Tensor::full(Shape::new(len, 1, 1, 1), S::lit(value)))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].tensor
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar count of entries of `kind`.
    pub fn count(&self, kind: ParamKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.tensor.len()).sum()
    }

    /// Turn every trainable entry into a frozen one.
    pub fn freeze(&mut self) {
        for e in &mut self.entries {
            if e.kind == ParamKind::Trainable {
                e.kind = ParamKind::Frozen;
            }
        }
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "store `{}` has {} entries, source has {}",
                self.name,
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry `{}` {} does not match `{}` {}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor = src.tensor.clone();
        }
        Ok(())
    }

    /// Bitwise equality of all tensors of the given kinds.
    pub fn bitwise_eq(&self, other: &Self, kinds: &[ParamKind]) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                !kinds.contains(&a.kind)
                    || (a.name == b.name
                        && a.tensor.shape() == b.tensor.shape()
                        && a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits()))
            })
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            name: self.name.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), kind: e.kind, tensor: e.tensor.cast() })
                .collect(),
        }
    }
}
