//! Named parameter storage and deterministic initialization.
//!
//! Every component derives its own RNG stream from (master seed, component
//! path), so components shared between model variants get bit-identical
//! parameters regardless of what else a variant allocates.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Flat, ordered collection of named parameters.
#[derive(Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.into(), tensor });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    /// Replace a parameter's values (same shape), used by the optimizer and
    /// the checkpoint loader.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) {
        debug_assert_eq!(self.entries[id.0].tensor.shape(), tensor.shape());
        self.entries[id.0].tensor = tensor;
    }

    pub fn set_by_index(&mut self, index: usize, tensor: Tensor<T>) {
        self.set(ParamId(index), tensor);
    }

    pub fn tensor_mut_by_index(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].tensor
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Register every parameter on a tape, in declaration order.
    pub fn vars(&self, tape: &mut Tape<T>) -> PVars {
        PVars { vars: self.entries.iter().map(|e| tape.leaf(&e.tensor)).collect() }
    }
}

/// Tape handles for every parameter of one forward pass, aligned by index
/// with the owning [`ParamSet`].
pub struct PVars {
    vars: Vec<Var>,
}

impl PVars {
    /// Build from externally created vars (e.g. a gradient-check harness
    /// that registers perturbed parameter tensors itself). Order must match
    /// the owning set's declaration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        PVars { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().copied()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG stream tied to (seed, component path); stable across platforms.
pub fn component_rng(seed: u64, path: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(path.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&(path.len() as u64).to_le_bytes());
    key[24..32].copy_from_slice(&seed.wrapping_mul(0x9e3779b97f4a7c15).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Zero-mean normal with std = sqrt(2 / fan_in), drawn in f64 so both
/// precisions see the same underlying stream.
pub fn normal_fan_in<T: Scalar>(
    shape: impl Into<Shape>,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let shape = shape.into();
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.numel()).map(|_| T::from_f64(std_normal(rng) * std)).collect();
    Tensor::from_vec(shape, data).expect("matching length")
}

pub(crate) fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

pub fn identity_matrix<T: Scalar>(n: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        data[i * n + i] = T::one();
    }
    Tensor::from_vec([n, n], data).expect("matching length")
}
