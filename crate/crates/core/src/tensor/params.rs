use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::array::Tensor;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Named learnable tensors, ordered by name for reproducible iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// `self += other` entry-wise; both stores must have the same layout.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let o = other
                .params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
            for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = *a + b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v = *v * k;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Registers a zero-mean Gaussian initialized tensor.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)));
        self.insert(name, t);
    }

    /// He-style initialization for a layer with `fan_in` inputs.
    pub fn init_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.init_normal(name, shape, std, rng);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, T::lit(value)));
    }

    /// Zeroes every parameter whose name matches `pred`.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.params.iter_mut() {
            if pred(name) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

/// Lazily binds stored parameters onto a tape as gradient-receiving leaves.
pub struct Bound<'t, T: Real> {
    tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    vars: RefCell<BTreeMap<String, Var<'t, T>>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore<T> {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        let v = self.tape.var(t.clone());
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }

    /// Gradients for every stored parameter; unused ones are zero.
    pub fn grads(&self, g: &Gradients<T>) -> ParamStore<T> {
        let vars = self.vars.borrow();
        let mut out = ParamStore::new();
        for (name, t) in self.store.iter() {
            let grad = match vars.get(name) {
                Some(v) => g.wrt(*v),
                None => Tensor::zeros(t.shape()),
            };
            out.insert(name.clone(), grad);
        }
        out
    }
}
