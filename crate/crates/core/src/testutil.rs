//! Test-only helpers: random inputs and the central-difference oracle.

use crate::autograd::{Tape, Tensor, Var};
use crate::rng;

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut r = rng::stream(seed, "testutil");
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng::uniform(-scale, scale, &mut r));
    t
}

/// Compares tape gradients of `f` against central differences (h = 1e-5)
/// for every element of every input.
pub fn assert_grad_matches(
    name: &str,
    inputs: &[Tensor],
    rtol: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) {
    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|x| t.leaf(x.detached())).collect();
        let l = f(&mut t, &vars);
        t.value(l).item().unwrap()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| t.leaf(x.detached().with_requires_grad(true)))
        .collect();
    let loss = f(&mut t, &vars);
    let grads = t.backward(loss).unwrap();
    let h = 1e-5;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()]);
        for i in 0..x.len() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1e-2);
            assert!(
                (a - numeric).abs() / denom <= rtol,
                "{name}: input {k} elem {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
