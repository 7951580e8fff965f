//! Shared helpers for the unit-test modules: deterministic random tensors
//! and a finite-difference gradient oracle that stays independent of the
//! tape's backward rules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Tape, Tensor, TensorId};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub type Build = dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> (TensorId, Vec<TensorId>);

/// Central finite differences on every element of every leaf, rebuilt
/// through `build` on a fresh tape per probe.
pub fn numeric_grads(build: &Build, params: &[Tensor<f64>], h: f64) -> Vec<Vec<f64>> {
    let eval = |params: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, params);
        tape.value(loss).data()[0]
    };
    params
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            (0..p.numel())
                .map(|i| {
                    let mut plus = params.to_vec();
                    plus[pi].data_mut()[i] += h;
                    let mut minus = params.to_vec();
                    minus[pi].data_mut()[i] -= h;
                    (eval(&plus) - eval(&minus)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// Runs backward once and asserts every leaf gradient matches the
/// finite-difference oracle within `tol`.
pub fn gradcheck(build: &Build, params: &[Tensor<f64>], tol: f64) {
    let mut tape = Tape::new();
    let (loss, leaf_ids) = build(&mut tape, params);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaf_ids
        .iter()
        .map(|&id| tape.grad(id).unwrap().to_vec())
        .collect();
    let numeric = numeric_grads(build, params, 1e-5);
    for (pi, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let e = rel_err(av, nv);
            assert!(
                e < tol,
                "param {pi} element {i}: analytic {av} vs numeric {nv} (rel err {e})"
            );
        }
    }
}
