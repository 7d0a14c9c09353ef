//! Named parameter storage and seeded initialisation.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Matrix;
use crate::error::ModelError;
use crate::text::fnv1a64;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered map from tensor name to value. Insertion order is the checkpoint
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let (idx, _) = self.tensors.insert_full(name.into(), value);
        ParamId(idx)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.tensors.get_index_of(name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.tensors.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    /// Overwrites every tensor of `self` with the equally named tensor of
    /// `other`. Missing names or shape differences are errors; extra tensors
    /// in `other` are ignored.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), ModelError> {
        for (name, value) in self.tensors.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| ModelError::UnknownParam(name.clone()))?;
            if src.dim() != value.dim() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    src.dim(),
                    value.dim()
                )));
            }
            value.assign(src);
        }
        Ok(())
    }
}

/// Per-tensor RNG derived from the run seed and the tensor name, so a
/// tensor's initial value does not depend on registration order.
pub fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()))
}

/// Uniform(−s, s) with s = sqrt(6 / (rows + cols)).
pub fn xavier_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let s = (6.0 / (rows + cols).max(1) as f64).sqrt();
    Matrix::from_shape_simple_fn((rows, cols), || rng.random_range(-s..=s))
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Registers parameters under a common name prefix with seeded init.
pub struct Registrar<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl<'a> Registrar<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Registrar { store, seed }
    }

    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let mut rng = tensor_rng(self.seed, name);
        let value = xavier_uniform(&mut rng, rows, cols);
        self.store.insert(name, value)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let mut rng = tensor_rng(self.seed, name);
        let value = normal(&mut rng, rows, cols, std);
        self.store.insert(name, value)
    }

    pub fn fill(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.insert(name, Matrix::from_elem((rows, cols), v))
    }
}
