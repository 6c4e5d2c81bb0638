//! Differentiable building blocks with hand-written reverse passes.
//!
//! Parameters live in a [`ParamStore`]; layers hold [`ParamId`]s into it so
//! one architecture can run against several weight sets (stages, `f64` copies
//! for gradient checks).

mod bundle;
mod gradcheck;
mod layers;
mod optim;

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

pub use bundle::{load_bundle, read_bundle, save_bundle, write_bundle, WeightBundle, BUNDLE_DTYPE};
pub use gradcheck::{grad_check, GradReport};
pub use layers::*;
pub use optim::Adam;

use crate::real::Real;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bundle: {0}")]
    Bundle(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

/// Batch of feature maps in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Feat<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Feat<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![T::zero(); n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "feature size");
        Self { n, c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.c * self.plane();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.c * self.plane();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn channel(&self, i: usize, ch: usize) -> &[T] {
        let p = self.plane();
        let off = (i * self.c + ch) * p;
        &self.data[off..off + p]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a = *a + b);
    }

    pub fn cast<U: Real>(&self) -> Feat<U> {
        Feat { n: self.n, c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Names are unique and shapes fixed once added.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), shapes: Vec::new(), data: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        assert_eq!(shape.iter().product::<usize>(), values.len(), "parameter {name} size");
        let id = self.names.len();
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.data.push(values);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.data
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.data
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads(self.data.iter().map(|d| vec![T::zero(); d.len()]).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self.data.iter().map(|d| d.iter().map(|v| U::of(v.as_f64())).collect()).collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn assign(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names || self.shapes != other.shapes {
            return Err(NeuralError::Shape("parameter stores differ in layout".into()));
        }
        self.data.clone_from(&other.data);
        Ok(())
    }

    pub fn zero_all(&mut self) {
        self.data.iter_mut().for_each(|d| d.iter_mut().for_each(|v| *v = T::zero()));
    }
}

/// Gradient buffers laid out like the owning [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T>(pub Vec<Vec<T>>);

impl<T: Real> Grads<T> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.0[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.0[id.0]
    }

    pub fn zero(&mut self) {
        self.0.iter_mut().for_each(|d| d.iter_mut().for_each(|v| *v = T::zero()));
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x = *x + y);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.0.iter_mut().for_each(|d| d.iter_mut().for_each(|v| *v = *v * s));
    }
}

/// Kaiming-uniform values for a layer with the given fan-in.
pub fn kaiming_uniform<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip_and_cast() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = s.add("b", &[1], vec![0.5]);
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.n_scalars(), 5);
        let d: ParamStore<f64> = s.cast();
        assert_eq!(d.get(a), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d.shape(a), &[2, 2]);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", &[1], vec![0.0]);
        s.add("a", &[1], vec![0.0]);
    }
}
