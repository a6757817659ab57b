//! Central finite-difference gradient checks in 64-bit arithmetic.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Result of comparing analytic and numeric gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over all inputs.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

/// Compares the tape gradient of `f` against central differences with step `eps`.
///
/// `f` receives a fresh graph and one leaf per input tensor and must return a
/// scalar. It is evaluated `2·Σ len(inputs) + 1` times.
pub fn check_gradient(
    inputs: &[Tensor<f64>],
    eps: f64,
    f: impl Fn(&Graph<f64>, &[Var]) -> Var,
) -> GradCheck {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let g = Graph::<f64>::new(false);
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars);
        g.value(out).data()[0]
    };

    let g = Graph::<f64>::new(false);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let orig = input.data()[k];
            work[i].data_mut()[k] = orig + eps;
            let plus = eval(&work);
            work[i].data_mut()[k] = orig - eps;
            let minus = eval(&work);
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[k];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    GradCheck {
        rel_error: if denom > 0.0 {
            diff2.sqrt() / denom
        } else {
            0.0
        },
        max_abs_error: max_abs,
        analytic_norm: a2.sqrt(),
    }
}
