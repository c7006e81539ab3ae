use rand::Rng;

use super::{Real, Tensor, TensorError};

/// Handle to a learnable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
}

/// Learnable parameters with gradient buffers, plus non-learnable named
/// buffers (batch-norm running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none() && self.buffer_index(&name).is_none(),
            "duplicate tensor name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `[-bound, bound]` with `bound = 1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)));
        self.add(name, value)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(
            self.find(&name).is_none() && self.buffer_index(&name).is_none(),
            "duplicate tensor name {name}"
        );
        self.buffers.push((name, value));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor<T>, &Tensor<T>) {
        let p = &mut self.params[id.0];
        (&mut p.value, &p.grad)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn buffer_index(&self, name: &str) -> Option<usize> {
        self.buffers.iter().position(|(n, _)| n == name)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>, TensorError> {
        self.buffer_index(name)
            .map(|i| &self.buffers[i].1)
            .ok_or_else(|| TensorError::Unknown(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, TensorError> {
        match self.buffer_index(name) {
            Some(i) => Ok(&mut self.buffers[i].1),
            None => Err(TensorError::Unknown(name.to_string())),
        }
    }

    /// All parameters and buffers as `(name, tensor)` pairs.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Overwrite a parameter or buffer by name, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<(), TensorError> {
        let slot = if let Some(id) = self.find(name) {
            &mut self.params[id.0].value
        } else {
            self.buffer_mut(name)?
        };
        if slot.shape() != value.shape() {
            return Err(super::shape_err(
                "assign",
                format!("`{name}`: expected {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        for (g, &d) in self.params[id.0].grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }
}
