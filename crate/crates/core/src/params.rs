//! Named, ordered parameter storage and deterministic initialization.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Learnable tensors in registration order, addressable by hierarchical name.
#[derive(Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Rc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        ensure!(!self.index.contains_key(&name), "duplicate parameter name {name:?}");
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(Rc::new(tensor));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.tensors[id.0])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter().map(|t| &**t))
    }

    /// Replace a tensor, keeping its name and shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        ensure!(
            tensor.shape() == self.get(id).shape(),
            "parameter {} has shape {}, replacement has {}",
            self.name(id),
            self.get(id).shape(),
            tensor.shape()
        );
        self.tensors[id.0] = Rc::new(tensor);
        Ok(())
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            *t = Rc::new(Tensor::zeros(t.shape()));
        }
    }

    /// Copy into another precision, names and order preserved.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Rc::new(t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Register every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &Graph<T>) -> Bound<T> {
        Bound {
            vars: self.tensors.iter().map(|t| graph.leaf_rc(Rc::clone(t))).collect(),
        }
    }

    /// True when both stores hold the same names, shapes and bitwise-equal values.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits_eq(y)))
    }
}

trait BitsEq {
    fn to_bits_eq(&self, other: &Self) -> bool;
}

impl<T: Scalar> BitsEq for T {
    fn to_bits_eq(&self, other: &Self) -> bool {
        // integer_decode distinguishes every finite value and the sign of zero
        self.integer_decode() == other.integer_decode()
    }
}

/// Parameters of a [`ParamStore`] bound to one graph.
pub struct Bound<T> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    /// Use caller-provided graph variables as the parameters, in store order.
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

/// Registers parameters under a dotted name prefix, drawing initial values
/// from one seeded stream in registration order.
pub struct ParamBuilder<T> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    /// Uniform in `±√(6 / fan_in)`.
    pub fn fan_in_uniform(&mut self, leaf: &str, shape: impl Into<Shape>) -> Result<ParamId> {
        let shape = shape.into();
        let fan_in = shape.c * shape.h * shape.w;
        ensure!(fan_in > 0, "parameter {leaf} has zero fan-in");
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(self.rng.gen_range(-bound..bound)))
            .collect();
        let name = self.full_name(leaf);
        self.store.insert(name, Tensor::from_vec(shape, data)?)
    }

    pub fn constant(&mut self, leaf: &str, shape: impl Into<Shape>, value: f64) -> Result<ParamId> {
        let name = self.full_name(leaf);
        self.store.insert(name, Tensor::full(shape, T::from_f64_lossy(value)))
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_scoped_and_unique() {
        let mut b = ParamBuilder::<f32>::new(0);
        b.scope("enc", |b| b.scope("L1", |b| b.fan_in_uniform("weight", [4, 2, 3, 3])))
            .unwrap();
        let dup = b.scope("enc", |b| b.scope("L1", |b| b.fan_in_uniform("weight", [4, 2, 3, 3])));
        assert!(dup.is_err());
        let store = b.finish();
        assert_eq!(store.name(ParamId(0)), "enc.L1.weight");
        assert_eq!(store.num_elements(), 72);
    }

    #[test]
    fn init_bound_and_determinism() {
        let build = || {
            let mut b = ParamBuilder::<f64>::new(42);
            b.fan_in_uniform("w", [8, 6, 1, 1]).unwrap();
            b.finish()
        };
        let (a, c) = (build(), build());
        assert!(a.bitwise_eq(&c));
        let bound = 1.0f64;
        assert!(a.get(ParamId(0)).data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn copy_on_write_after_bind() {
        let mut b = ParamBuilder::<f32>::new(1);
        let id = b.constant("a", [1, 1, 1, 1], 2.0).unwrap();
        let mut store = b.finish();
        let g = Graph::new();
        let bound = store.bind(&g);
        store.get_mut(id).data_mut()[0] = 5.0;
        assert_eq!(bound.var(id).value().data(), &[2.0]);
        assert_eq!(store.get(id).data(), &[5.0]);
    }
}
