//! Shared helpers for unit tests.

use ndarray::IxDyn;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Tensor, Var};
use crate::rng::stream;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, &[]);
    Tensor::from_shape_fn(IxDyn(shape), |_| StandardNormal.sample(&mut rng))
}

/// Checks analytic gradients of `f(inputs) -> scalar` against central differences.
pub fn check(inputs: Vec<Tensor>, f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>, tol: f64) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);
    let eval = |inputs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let h = 1e-5;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].raw_dim()));
        for k in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].as_slice_mut().unwrap()[k] += h;
            let mut minus = inputs.clone();
            minus[i].as_slice_mut().unwrap()[k] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(err <= tol, "input {i} elem {k}: analytic {a} numeric {numeric}");
        }
    }
}
