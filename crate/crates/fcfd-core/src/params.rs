//! Named parameter storage shared by models, bridges and exit branches.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::ArrayD;
use rand::Rng;

use crate::graph::Scalar;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter within its owning [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Globally unique handle (store id, parameter index) used by graph bindings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub store: u64,
    pub index: usize,
}

pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

pub struct ParamStore<F: Scalar> {
    id: u64,
    /// When frozen, parameters enter graphs as constants and receive no gradient.
    pub frozen: bool,
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            frozen: false,
            entries: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let grad = ArrayD::zeros(value.raw_dim());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn pref(&self, id: ParamId) -> ParamRef {
        ParamRef {
            store: self.id,
            index: id.0,
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(F::zero());
        }
    }

    /// Adds gradients from a finished backward pass into this store.
    pub fn accumulate(
        &mut self,
        graph: &crate::graph::Graph<F>,
        grads: &[Option<ArrayD<F>>],
    ) {
        for &(node, pref) in graph.bindings() {
            if pref.store == self.id {
                if let Some(g) = &grads[node] {
                    self.entries[pref.index].grad += g;
                }
            }
        }
    }

    /// Deep copy with a fresh store id.
    pub fn clone_fresh(&self) -> Self {
        let mut out = ParamStore::new();
        out.frozen = self.frozen;
        for e in &self.entries {
            out.add(e.name.clone(), e.value.clone());
        }
        out
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Fan-in-scaled uniform initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
/// All draws happen in f64 so f32 and f64 models initialize identically.
pub fn uniform_fan_in<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::f(rng.gen_range(-bound..bound)))
        .collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}
