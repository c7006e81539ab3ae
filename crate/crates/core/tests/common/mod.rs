#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strl::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Forward a function of `inputs`, reduce it with a fixed random projection and
/// compare analytic input gradients with central differences. Returns the
/// worst relative error over every input element.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut r = rng(seed);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        random(g.shape(out), &mut r)
    };
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).dot(&probe)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let p = g.input(probe.clone());
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("input gradient").data().to_vec();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Compare parameter gradients of a scalar loss against central differences.
/// Returns the worst relative error and the number of scalars checked.
pub fn check_params<F>(store: &ParamStore<f64>, h: f64, f: F) -> (f64, usize)
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Var,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g);
    let grads = g.backward(loss).unwrap();
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = f(s, &mut g);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut work = store.clone();
    for id in store.ids() {
        let analytic = grads.param(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; store.value(id).numel()]);
        for j in 0..store.value(id).numel() {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let up = eval(&work);
            work.value_mut(id).data_mut()[j] = orig - h;
            let down = eval(&work);
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(analytic[j], numeric);
            if e > worst {
                worst = e;
            }
            count += 1;
        }
    }
    (worst, count)
}
