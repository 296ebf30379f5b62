//! Central finite-difference gradient checking. Used by the test suites
//! as an oracle independent of the analytic backward passes.

use super::{Graph, Tensor, TensorId};
use crate::Real;

/// Central finite-difference gradient of a scalar function.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = f(&xp);
        xp[i] = orig - eps;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Deterministic pseudo-random weights for reducing a tensor output to a
/// scalar objective.
fn probe_weights(n: usize, salt: u64) -> Vec<Real> {
    let mut state = salt.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) as Real
        })
        .collect()
}

/// Check every input gradient of a graph-building closure against central
/// finite differences. The scalar objective is the weighted sum of the
/// output entries with fixed pseudo-random weights. Returns the max
/// normalized error, or an error string naming the offending entry.
///
/// The closure is re-invoked for every perturbed evaluation, so it must
/// be a pure function of the leaf tensors (recreate any BnStats inside).
pub fn check_op<F>(inputs: &[Tensor], eps: Real, tol: Real, mut build: F) -> Result<Real, String>
where
    F: FnMut(&mut Graph, &[TensorId]) -> TensorId,
{
    let eval = |tensors: &[Tensor], build: &mut F| -> (Real, Graph, Vec<TensorId>, TensorId) {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids);
        let w = probe_weights(g.value(out).numel(), 42);
        let loss: Real = g.value(out).data.iter().zip(&w).map(|(&y, &wi)| y * wi).sum();
        (loss, g, ids, out)
    };

    // analytic gradients
    let (_, mut graph, ids, out) = eval(inputs, &mut build);
    let w = probe_weights(graph.value(out).numel(), 42);
    let shape = graph.value(out).shape.clone();
    graph.backward(vec![(out, Tensor::from_vec(&shape, w))]);
    let analytic: Vec<Option<Tensor>> = ids.iter().map(|&id| graph.grad(id).cloned()).collect();

    let mut max_err: Real = 0.0;
    let mut tensors = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        let n = tensors[ti].numel();
        for ei in 0..n {
            let orig = tensors[ti].data[ei];
            tensors[ti].data[ei] = orig + eps;
            let (fp, ..) = eval(&tensors, &mut build);
            tensors[ti].data[ei] = orig - eps;
            let (fm, ..) = eval(&tensors, &mut build);
            tensors[ti].data[ei] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = grad.as_ref().map(|g| g.data[ei]).unwrap_or(0.0);
            let err = (a - fd).abs() / (1.0 as Real).max(a.abs()).max(fd.abs());
            max_err = max_err.max(err);
            if err > tol {
                return Err(format!(
                    "gradient mismatch: input {ti} entry {ei}: analytic {a}, finite-diff {fd}, err {err:.3e} > tol {tol:.1e}"
                ));
            }
        }
    }
    Ok(max_err)
}
