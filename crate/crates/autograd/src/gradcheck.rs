//! Central finite differences, used as the independent check on analytic
//! gradients.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

/// Numeric gradient of the scalar function `f` at `x` by central differences.
pub fn numeric_gradient(x: &Tensor, eps: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (up - down) / (2.0 * eps);
    }
    Tensor::new(x.shape(), out)
}

/// Compares the tape gradient of `build(graph, leaf) -> scalar` at `x`
/// against central differences of the same forward computation.
pub fn check(x: &Tensor, eps: f64, build: impl Fn(&Graph, Var) -> Var) -> GradCheck {
    let g = Graph::new();
    let leaf = g.leaf(x.clone());
    let loss = build(&g, leaf);
    let grads = g.backward(loss);
    let analytic = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numeric_gradient(x, eps, |p| {
        let g = Graph::inference();
        let leaf = g.constant(p.clone());
        let out = build(&g, leaf);
        let v = g.value(out).item();
        v
    });
    compare(&analytic, &numeric)
}

pub fn compare(analytic: &Tensor, numeric: &Tensor) -> GradCheck {
    let diff = analytic.zip_map(numeric, |a, b| a - b);
    let denom = analytic.sq_norm().sqrt().max(numeric.sq_norm().sqrt()).max(1e-300);
    GradCheck {
        rel_error: diff.sq_norm().sqrt() / denom,
        max_abs_error: diff.data().iter().fold(0.0, |m, d| m.max(d.abs())),
        analytic_norm: analytic.sq_norm().sqrt(),
    }
}
