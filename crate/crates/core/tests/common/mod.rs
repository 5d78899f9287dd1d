#![allow(dead_code)]

use c2d_core::layer::ParamBuilder;
use c2d_core::params::ParamStore;
use c2d_core::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f32 = 1e-2;
pub const TOL: f64 = 1e-2;
/// Absolute floor for deep graphs, where f32 rounding of the forward pass
/// puts roughly 1e-4 of noise on each difference quotient.
pub const DEEP_ATOL: f64 = 3e-4;
pub const OP_ATOL: f64 = 1e-5;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// `Σ out ⊙ R` in f64 for a fixed random `R`.
fn weighted(out: &Tensor) -> f64 {
    let r = rand_tensor(out.shape(), 999);
    out.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Appends the weighted-sum loss and back-propagates it.
fn backprop(g: &mut Graph, out: Var) {
    let r = g.input(rand_tensor(g.shape(out), 999));
    let prod = g.mul(out, r).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
}

/// Indices probed for a tensor: all of them when small, a spread otherwise.
fn probes(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max).collect()
    }
}

fn compare(name: &str, what: &str, analytic: &[f64], numeric: &[f64], atol: f64) {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-3);
    let rel = diff / scale;
    let close = analytic.iter().zip(numeric).all(|(a, n)| (a - n).abs() <= atol + TOL * n.abs());
    assert!(
        rel < TOL || close,
        "{name}/{what}: relative error {rel:.3e}\nanalytic {analytic:?}\nnumeric  {numeric:?}"
    );
}

/// Checks the input gradients of `f` at `inputs`.
pub fn check_op(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    backprop(&mut g, out);
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        weighted(g.value(out))
    };
    for (i, t) in inputs.iter().enumerate() {
        let grad = g.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in probes(t.numel(), 60) {
            let mut ins = inputs.to_vec();
            ins[i].data_mut()[j] += EPS;
            let up = eval(&ins);
            ins[i].data_mut()[j] -= 2.0 * EPS;
            let down = eval(&ins);
            numeric.push((up - down) / (2.0 * EPS as f64));
            analytic.push(grad.data()[j] as f64);
        }
        compare(name, &format!("input {i}"), &analytic, &numeric, OP_ATOL);
    }
}

/// Checks every parameter gradient of the graph `build` records.
pub fn check_params(name: &str, store: &ParamStore, build: impl Fn(&ParamStore) -> (Graph<'_>, Var)) {
    let (mut g, out) = build(store);
    backprop(&mut g, out);
    let grads = g.param_grads();
    for id in store.ids() {
        let t = store.get(id);
        let grad = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in probes(t.numel(), 12) {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[j] += EPS;
            let up = {
                let (g, out) = build(&s);
                weighted(g.value(out))
            };
            s.get_mut(id).data_mut()[j] -= 2.0 * EPS;
            let down = {
                let (g, out) = build(&s);
                weighted(g.value(out))
            };
            numeric.push((up - down) / (2.0 * EPS as f64));
            analytic.push(grad.data()[j] as f64);
        }
        compare(name, store.name(id), &analytic, &numeric, DEEP_ATOL);
    }
}

/// Builds a module with fresh parameters and checks gradients with respect
/// to both its parameters and its input.
pub fn check_model<M>(
    name: &str,
    build: impl FnOnce(&mut ParamBuilder<'_, ChaCha8Rng>) -> M,
    x: &Tensor,
    fwd: impl Fn(&M, &mut Graph, Var) -> Var,
) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let module = {
        let mut pb = ParamBuilder {
            store: &mut store,
            rng: &mut rng,
        };
        build(&mut pb)
    };
    check_params(name, &store, |s| {
        let mut g = Graph::with_params(s);
        let xv = g.input(x.clone());
        let y = fwd(&module, &mut g, xv);
        (g, y)
    });
    // input gradient
    let mut g = Graph::with_params(&store);
    let xv = g.leaf(x.clone());
    let y = fwd(&module, &mut g, xv);
    backprop(&mut g, y);
    let grad = g.grad(xv).unwrap().clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for j in probes(x.numel(), 40) {
        let mut xp = x.clone();
        xp.data_mut()[j] += EPS;
        let mut g = Graph::with_params(&store);
        let v = g.input(xp.clone());
        let o = fwd(&module, &mut g, v);
        let up = weighted(g.value(o));
        xp.data_mut()[j] -= 2.0 * EPS;
        let mut g = Graph::with_params(&store);
        let v = g.input(xp);
        let o = fwd(&module, &mut g, v);
        let down = weighted(g.value(o));
        numeric.push((up - down) / (2.0 * EPS as f64));
        analytic.push(grad.data()[j] as f64);
    }
    compare(name, "input", &analytic, &numeric, DEEP_ATOL);
}
