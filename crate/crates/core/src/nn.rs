//! Layers shared by the auto-encoder and the relation module.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::{BatchStats, Graph, ParamId, ParamStore, Real, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Square `kernel x kernel` convolution, `[cout, cin, k, k]` weights.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Transposed convolution with `[cin, cout, k, k]` weights.
#[derive(Clone, Debug)]
pub struct ConvT {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvT {
    /// Kernel 3, stride 2, padding 1, output padding 1: exactly doubles H and W.
    pub fn upsample2<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[cin, cout, 3, 3], cout * 9, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvT {
            weight,
            bias,
            stride: 2,
            padding: 1,
            output_padding: 1,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.transpose_conv2d(x, w, b, self.stride, self.padding, self.output_padding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and record them.
    Train,
    /// Normalize with the running statistics.
    Infer,
}

/// Batch-norm behaviour for one forward pass.
#[derive(Debug)]
pub struct NormCtx<T> {
    mode: NormMode,
    replay: Option<HashMap<String, BatchStats<T>>>,
    observed: Vec<Observed<T>>,
}

/// Batch statistics one layer saw, with the number of values per channel.
#[derive(Clone, Debug)]
pub struct Observed<T> {
    pub layer: String,
    pub stats: BatchStats<T>,
    pub count: usize,
}

impl<T: Real> NormCtx<T> {
    pub fn train() -> Self {
        NormCtx {
            mode: NormMode::Train,
            replay: None,
            observed: Vec::new(),
        }
    }

    pub fn infer() -> Self {
        NormCtx {
            mode: NormMode::Infer,
            replay: None,
            observed: Vec::new(),
        }
    }

    /// Reuse the statistics another pass observed, without recording new ones.
    /// The replayed statistics are constants to the backward pass.
    pub fn replay(source: &NormCtx<T>) -> Self {
        NormCtx {
            mode: NormMode::Train,
            replay: Some(source.observed.iter().map(|o| (o.layer.clone(), o.stats.clone())).collect()),
            observed: Vec::new(),
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn observed(&self) -> &[Observed<T>] {
        &self.observed
    }

    /// Fold the recorded batch statistics into the running averages.
    pub fn update_running(&self, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        let m = T::lit(BN_MOMENTUM);
        for Observed { layer: name, stats, count } in &self.observed {
            // running variance is the unbiased estimate
            let n = T::from_usize(*count).unwrap();
            let correction = n / (n - T::one());
            let rm = store.buffer_mut(&format!("{name}.running_mean"))?;
            for (r, &v) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = (T::one() - m) * *r + m * v;
            }
            let rv = store.buffer_mut(&format!("{name}.running_var"))?;
            for (r, &v) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = (T::one() - m) * *r + m * v * correction;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
        BatchNorm {
            name: name.to_string(),
            gamma,
            beta,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ctx: &mut NormCtx<T>, x: Var) -> Result<Var, TensorError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        if let Some(replay) = &ctx.replay {
            let stats = replay.get(&self.name).ok_or_else(|| TensorError::Unknown(format!("{} batch statistics", self.name)))?;
            return g.batch_norm_fixed(x, gamma, beta, stats, BN_EPS);
        }
        match ctx.mode {
            NormMode::Train => {
                let shape = g.shape(x);
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                ctx.observed.push(Observed {
                    layer: self.name.clone(),
                    stats,
                    count,
                });
                Ok(y)
            }
            NormMode::Infer => {
                let stats = BatchStats {
                    mean: store.buffer(&format!("{}.running_mean", self.name))?.data().to_vec(),
                    var: store.buffer(&format!("{}.running_var", self.name))?.data().to_vec(),
                };
                g.batch_norm_fixed(x, gamma, beta, &stats, BN_EPS)
            }
        }
    }
}
