//! Finite-difference gradient checking.
//!
//! Every differentiable op in this crate is validated against a central
//! difference oracle: the analytic gradient comes from one tape backward
//! pass, the reference from `(f(x+h) - f(x-h)) / 2h` per element.

use super::{Graph, Param, Var};
use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest absolute difference between analytic and numeric gradients.
    pub max_abs_err: f64,
    /// Largest `|a - n| / max(1, |a|, |n|)` over all checked elements.
    pub max_rel_err: f64,
    /// Total number of parameter elements compared.
    pub checked: usize,
}

/// Central-difference gradient of `build`'s scalar output with respect to
/// every element of `param`.
pub fn central_diff_grad(
    build: &dyn Fn(&mut Graph) -> Var,
    param: &Param,
    eps: f64,
) -> ArrayD<f64> {
    let base = param.value();
    let mut out = ArrayD::<f64>::zeros(base.raw_dim());
    let eval = |p: &Param, v: ArrayD<f64>| -> f64 {
        p.set_value(v);
        let mut g = Graph::new();
        let root = build(&mut g);
        g.scalar_value(root)
    };
    for idx in ndarray::indices(base.raw_dim()) {
        let mut plus = base.clone();
        plus[&idx] += eps;
        let lp = eval(param, plus);
        let mut minus = base.clone();
        minus[&idx] -= eps;
        let lm = eval(param, minus);
        out[&idx] = (lp - lm) / (2.0 * eps);
    }
    param.set_value(base);
    out
}

/// Run one analytic backward pass and compare every parameter gradient with
/// the central-difference oracle. Panics with context if any element is off
/// by more than `tol` in the relative metric.
pub fn check_grads(
    build: &dyn Fn(&mut Graph) -> Var,
    params: &[&Param],
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    for p in params {
        p.zero_grad();
    }
    let mut g = Graph::new();
    let root = build(&mut g);
    g.backward(root);

    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        checked: 0,
    };
    for p in params {
        let analytic = p.grad();
        let numeric = central_diff_grad(build, p, eps);
        for (idx, &a) in analytic.indexed_iter() {
            let n = numeric[&idx];
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(1.0);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
            assert!(
                rel <= tol,
                "gradient mismatch for {} at {:?}: analytic {a:.9e}, numeric {n:.9e} (rel {rel:.3e} > tol {tol:.1e})",
                p.name(),
                idx,
            );
        }
    }
    report
}

/// Like [`check_grads`], but probes at most `max_per_param` randomly
/// chosen elements of each parameter (all of them when the tensor is
/// smaller). One backward pass still produces the full analytic gradient;
/// only the finite-difference oracle is subsampled, which keeps deep
/// end-to-end checks affordable on wide tensors.
pub fn check_grads_sampled(
    build: &dyn Fn(&mut Graph) -> Var,
    params: &[&Param],
    eps: f64,
    tol: f64,
    max_per_param: usize,
    seed: u64,
) -> GradCheckReport {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    assert!(max_per_param > 0, "need at least one probe per parameter");
    for p in params {
        p.zero_grad();
    }
    let mut g = Graph::new();
    let root = build(&mut g);
    g.backward(root);

    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        checked: 0,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for p in params {
        let analytic = p.grad();
        let base = p.value();
        let flat = base
            .as_slice()
            .expect("parameter values are standard layout");
        let mut order: Vec<usize> = (0..flat.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(max_per_param.min(flat.len()));

        let eval = |v: ArrayD<f64>| -> f64 {
            p.set_value(v);
            let mut g = Graph::new();
            let root = build(&mut g);
            g.scalar_value(root)
        };
        for &i in &order {
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[i] += eps;
            let lp = eval(plus);
            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[i] -= eps;
            let lm = eval(minus);
            let n = (lp - lm) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[i];
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(1.0);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
            assert!(
                rel <= tol,
                "gradient mismatch for {} at flat index {i}: analytic {a:.9e}, numeric {n:.9e} (rel {rel:.3e} > tol {tol:.1e})",
                p.name(),
            );
        }
        p.set_value(base);
    }
    report
}
