//! Flat parameter arena. Layers hold [`ParamId`] handles; the optimizer,
//! checkpoint writer, and gradient buffers all view parameters through the
//! same canonical ordering, so update/serialize/restore are trivially
//! consistent.

use super::scalar::Scalar;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    tensors: Vec<Vec<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a zero-initialized parameter tensor.
    pub fn alloc(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let numel: usize = shape.iter().product();
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.tensors.push(vec![T::ZERO; numel]);
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a parameter drawn from the fan-in-scaled uniform
    /// distribution `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn alloc_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let id = self.alloc(name, shape);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in self.tensors[id.0].iter_mut() {
            *v = T::from_f64(rng.gen_range(-bound..bound));
        }
        id
    }

    pub fn alloc_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let id = self.alloc(name, shape);
        for v in self.tensors[id.0].iter_mut() {
            *v = T::from_f64(value);
        }
        id
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[T])> {
        (0..self.len()).map(move |i| {
            (
                self.names[i].as_str(),
                self.shapes[i].as_slice(),
                self.tensors[i].as_slice(),
            )
        })
    }

    /// Gradient (or optimizer moment) buffers shaped like this store.
    pub fn zeros_like(&self) -> Grads<T> {
        Grads {
            tensors: self.tensors.iter().map(|t| vec![T::ZERO; t.len()]).collect(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zero(&mut self) {
        for t in self.tensors.iter_mut() {
            for v in t.iter_mut() {
                *v = T::ZERO;
            }
        }
    }

    /// Accumulates `other` in place; the caller fixes the reduction order.
    pub fn accumulate(&mut self, other: &Grads<T>) {
        debug_assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors.iter_mut() {
            for v in t.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Euclidean norm over every element, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for t in &self.tensors {
            for v in t {
                let x = v.to_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }
}
