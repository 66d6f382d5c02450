//! Test-only oracles: central finite differences and brute-force helpers.
#![allow(dead_code)]

use fusionreid::tensor::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller keeps this independent of the library's samplers.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Relative error with a small absolute floor in the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks every input gradient of `f` against central differences of the
/// scalar `sum(f(inputs) ∘ w)` with a fixed random projection `w`.
/// Returns the worst relative error seen.
pub fn check_op<F>(inputs: &[Tensor], seed: u64, h: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let projection = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let shape = f(&tape, &vars).shape();
        randn(&mut rng(seed ^ 0x5eed), &shape)
    };
    let scalar = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars).value();
        out.data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars);
    let w = tape.constant(projection.clone());
    let loss = out.mul(w).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Gradients keyed by parameter path.
pub type GradMap = std::collections::BTreeMap<String, Tensor>;

/// Checks store gradients at the chosen `(path, flat index)` entries against
/// central differences of the scalar returned by `f`. `f` evaluates the loss
/// on the given store and, for the unperturbed call, its gradients.
/// Returns the worst relative error and the per-entry errors.
pub fn check_store_grads<F>(
    store: &ParamStore,
    picks: &[(String, usize)],
    h: f64,
    f: F,
) -> (f64, Vec<f64>)
where
    F: Fn(&mut ParamStore) -> (f64, GradMap),
{
    let (_, grads) = f(&mut store.clone());
    let mut errs = Vec::with_capacity(picks.len());
    for (path, j) in picks {
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.value_mut(path).unwrap().data_mut()[*j] += delta;
            f(&mut s).0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = grads.get(path).map_or(0.0, |g| g.data()[*j]);
        errs.push(rel_err(analytic, numeric));
    }
    (errs.iter().cloned().fold(0.0, f64::max), errs)
}

/// Gradients of all parameters bound by a pass.
pub fn bound_grads<'t>(
    fwd: &fusionreid::nn::Forward<'t, '_>,
    grads: &fusionreid::tensor::Gradients,
) -> GradMap {
    fwd.bound()
        .map(|(p, v)| (p.to_string(), grads.get_or_zeros(v)))
        .collect()
}
