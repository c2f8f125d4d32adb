//! Named parameter tensors, gradient buffers and the Adam optimizer.

use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Glorot,
    Uniform(f64),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut R) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {}", name);
        let n = rows * cols;
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Const(c) => vec![T::c(c); n],
            Init::Glorot => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let d = Uniform::new_inclusive(-a, a);
                (0..n).map(|_| T::c(d.sample(rng))).collect()
            }
            Init::Uniform(a) => {
                let d = Uniform::new_inclusive(-a, a);
                (0..n).map(|_| T::c(d.sample(rng))).collect()
            }
        };
        self.insert(name, Tensor { rows, cols, data })
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Converts every tensor to another scalar type (e.g. to round-trip through f32).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { rows: t.rows, cols: t.cols, data: t.data.iter().map(|x| U::c(x.f64())).collect() })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout<U>(&self, other: &ParamStore<U>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }
}

/// Gradient buffer laid out like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    data: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { data: store.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for x in self.data.iter_mut().flatten() {
            *x *= s;
        }
    }

    pub fn norm(&self) -> T {
        self.data.iter().flatten().fold(T::zero(), |acc, x| acc + *x * *x).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().flatten().all(|x| *x == T::zero())
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: T) -> T {
        let n = self.norm();
        if n > max_norm && n > T::zero() {
            self.scale(max_norm / n);
        }
        n
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self { lr: T::c(lr), beta1: T::c(0.9), beta2: T::c(0.999), eps: T::c(1e-8), m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.t += 1;
        let b1t = T::one() - self.beta1.powi(self.t);
        let b2t = T::one() - self.beta2.powi(self.t);
        for (k, t) in store.tensors.iter_mut().enumerate() {
            let g = &grads.data[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for j in 0..t.data.len() {
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g[j] * g[j];
                let mh = m[j] / b1t;
                let vh = v[j] / b2t;
                t.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
