//! Shared oracles for the integration tests.

#![allow(dead_code)]

use dlora_core::autograd::{Tape, Tensor, Var};
use dlora_core::rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so that gradients near
/// zero are compared on an absolute scale of `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut r = rng::stream(seed, "integration");
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng::uniform(-scale, scale, &mut r));
    t
}

/// Worst relative error between tape gradients of the scalar `f` and
/// central differences, over every element of every input.
pub fn grad_check(inputs: &[Tensor], floor: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|x| t.leaf(x.detached())).collect();
        let l = f(&mut t, &vars);
        t.value(l).item().unwrap()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.detached().with_requires_grad(true))).collect();
    let loss = f(&mut t, &vars);
    let grads = t.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric, floor));
        }
    }
    worst
}
