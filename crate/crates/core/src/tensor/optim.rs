use super::{ParamStore, Real, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state, one pair of moment buffers per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u32,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    pub fn moments(&self, index: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.first[index], &self.second[index])
    }

    /// Restore saved state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u32, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Result<(), TensorError> {
        if first.len() != self.first.len() || second.len() != self.second.len() {
            return Err(super::shape_err("adam", "moment count does not match parameter count"));
        }
        for (i, (m, v)) in first.iter().zip(&second).enumerate() {
            if m.shape() != self.first[i].shape() || v.shape() != self.second[i].shape() {
                return Err(super::shape_err("adam", format!("moment {i} has the wrong shape")));
            }
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Apply one bias-corrected update using the gradients held in `store`.
    /// Gradients are left untouched; call [`ParamStore::zero_grad`] between steps.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        if store.len() != self.first.len() {
            return Err(super::shape_err("adam", "parameter count changed since creation"));
        }
        for id in store.ids() {
            if !store.grad(id).all_finite() {
                return Err(TensorError::NonFiniteGrad(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step_size = T::lit(c.lr / correction1);
        let root2 = T::lit(correction2.sqrt());
        let eps = T::lit(c.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (value, grad) = store.value_and_grad_mut(id);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / root2 + eps);
            }
        }
        Ok(())
    }
}
