//! Named parameter storage shared by the model, optimizer and EMA.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Parameters in insertion order. Order is part of the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; registration is programmer-controlled.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(self.values[id.0].shape(), value.shape());
        self.values[id.0] = value;
    }

    /// Replaces a parameter with one of a different shape (used when a
    /// modality is appended or replaced).
    pub(crate) fn reshape(&mut self, id: ParamId, value: Matrix) {
        self.values[id.0] = value;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// True when both stores have the same names in the same order with the
    /// same shapes.
    pub fn congruent(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Adds Gaussian noise of the given scale to every parameter. Used to move
    /// a zero-initialized network off its degenerate starting point in tests
    /// and gradient checks.
    pub fn jitter<R: Rng>(&mut self, rng: &mut R, std: f64) {
        for v in &mut self.values {
            for x in v.data_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *x += std * n;
            }
        }
    }
}

/// Per-parameter gradients, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn empty(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `None` means the parameter did not influence the loss (exactly zero).
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: Matrix) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }

    /// Largest absolute gradient entry of a parameter; 0 when absent.
    pub fn max_abs(&self, id: ParamId) -> f64 {
        self.get(id)
            .map(|g| g.data().iter().fold(0.0f64, |m, x| m.max(x.abs())))
            .unwrap_or(0.0)
    }
}
