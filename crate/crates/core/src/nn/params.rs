use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::float::Scalar;
use super::tensor::Tensor;
use super::NnError;

/// A trainable array with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> TensorValue<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self {
            value,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[T]) {
        match &mut self.grad {
            Some(existing) => {
                for (e, &v) in existing.data_mut().iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => {
                self.grad = Some(
                    Tensor::new(self.value.shape().to_vec(), g.to_vec())
                        .expect("gradient matches parameter shape"),
                )
            }
        }
    }
}

/// Handle to a registered parameter: its registration index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named registry of trainable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore<T> {
    entries: IndexMap<String, TensorValue<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId, NnError> {
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateParameter(name.to_string()));
        }
        let (idx, _) = self.entries.insert_full(name.to_string(), TensorValue::new(value));
        Ok(ParamId(idx))
    }

    /// Registers a tensor drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn register_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId, NnError> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
            .collect();
        self.register(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn register_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, NnError> {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &TensorValue<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut TensorValue<T> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&TensorValue<T>> {
        self.entries.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut TensorValue<T>> {
        self.entries.get_mut(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorValue<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut TensorValue<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|v| v.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for v in self.entries.values_mut() {
            v.zero_grad();
        }
    }

    /// Adds per-parameter gradients (indexed by registration order).
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) {
        for (idx, g) in grads.iter() {
            let entry = &mut self.entries[idx];
            if entry.requires_grad {
                entry.accumulate_grad(g);
            }
        }
    }

    pub fn set_requires_grad_prefix(&mut self, prefix: &str, requires_grad: bool) {
        for (name, v) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                v.requires_grad = requires_grad;
                if !requires_grad {
                    v.grad = None;
                }
            }
        }
    }

    /// Fills every parameter whose name starts with `prefix` with zeros.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, v) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                v.value.data_mut().fill(T::zero());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    let mut tv = TensorValue::new(v.value.cast());
                    tv.requires_grad = v.requires_grad;
                    (k.clone(), tv)
                })
                .collect(),
        }
    }
}

/// Sparse collection of parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn with_len(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub fn add(&mut self, idx: usize, g: &[T]) {
        if idx >= self.slots.len() {
            self.slots.resize(idx + 1, None);
        }
        match &mut self.slots[idx] {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn get(&self, idx: usize) -> Option<&[T]> {
        self.slots.get(idx).and_then(|s| s.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_deref().map(|g| (i, g)))
    }

    /// Sums `other` into `self` in place.
    pub fn merge(&mut self, other: &ParamGrads<T>) {
        for (idx, g) in other.iter() {
            self.add(idx, g);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.slots.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
}
